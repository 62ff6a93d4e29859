//! Configuration, orchestration of simulate -> fit -> select -> test ->
//! report, and artifact persistence.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{build_projection, AnchorBasis, HyperParams};
use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::diagnostics::{self, DiagnosticsReport, DEFAULT_MI_BINS};
use crate::error::{Error, Result};
use crate::hyptest::{full_test, Tails, TestConfig, TestOutcome, TestReport};
use crate::scm::{self, ScmSpec};
use crate::selection::{
    cv_objectives, kfold_groups, member_seeds, preprocess_train, select_weighted_l2, Grid, ObjectiveTable,
    RefitMode, Selection, SubagConfig,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Detection,
    Attribution,
}

fn default_basis() -> Vec<String> {
    vec!["identity".into()]
}

fn default_weights() -> [f64; 2] {
    [0.5, 0.5]
}

fn default_members() -> usize {
    50
}

fn default_folds() -> usize {
    3
}

fn default_alpha() -> f64 {
    0.05
}

fn default_window() -> usize {
    50
}

fn default_train_fraction() -> f64 {
    0.5
}

fn default_mi_bins() -> usize {
    DEFAULT_MI_BINS
}

/// One experiment: mode, forcing names, model settings, and the data source.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub target_forcing: String,
    #[serde(default)]
    pub anchor_forcings: Vec<String>,
    #[serde(default = "default_basis")]
    pub basis: Vec<String>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "default_weights")]
    pub weights: [f64; 2],
    #[serde(default = "default_members")]
    pub subag_members: usize,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_alpha")]
    pub alpha_star: f64,
    #[serde(default)]
    pub tails: Tails,
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub refit: RefitMode,
    #[serde(default = "default_mi_bins")]
    pub mi_bins: usize,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gammas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<LambdaSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Values(Vec<f64>),
    Log { min: f64, max: f64, count: usize },
}

impl GridConfig {
    pub fn to_grid(&self) -> Result<Grid> {
        let defaults = Grid::default();
        let gammas = self.gammas.clone().unwrap_or(defaults.gammas);
        let lambdas = match &self.lambdas {
            None => defaults.lambdas,
            Some(LambdaSpec::Values(v)) => v.clone(),
            Some(LambdaSpec::Log { min, max, count }) => Grid::log_lambdas(*min, *max, *count),
        };
        Grid::new(gammas, lambdas)
    }
}

/// Where the samples come from: a manifest on disk or a built-in simulation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<ScenarioConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    /// Weak anchor shifts in training, strong shifts in testing.
    Motivating { seed: u64 },
    /// Anchor with linear plus quadratic response channels.
    Quadratic { seed: u64 },
    /// A models x runs ensemble from an explicit forcing description.
    Ensemble(EnsembleConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub seed: u64,
    pub models: usize,
    pub forced_runs: usize,
    pub control_runs: usize,
    pub cells: usize,
    pub steps: usize,
    pub noise_sigma: f64,
    pub noise_corr_len: f64,
    pub forcings: Vec<ForcingConfig>,
    #[serde(default)]
    pub interventions: Vec<scm::Intervention>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingConfig {
    pub name: String,
    pub role: scm::ForcingRole,
    pub series: SeriesConfig,
    pub imprint: ImprintConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeriesConfig {
    /// Forcing growing like 1%-per-step compounding CO2.
    Co2Ramp,
    Sinusoid { amplitude: f64, period: f64 },
    Constant { value: f64 },
    Values { values: Vec<f64> },
}

impl SeriesConfig {
    fn materialize(&self, steps: usize) -> Result<Vec<f64>> {
        Ok(match self {
            SeriesConfig::Co2Ramp => scm::co2_ramp_series(steps),
            SeriesConfig::Sinusoid { amplitude, period } => scm::sinusoid_series(steps, *amplitude, *period),
            SeriesConfig::Constant { value } => scm::constant_series(steps, *value),
            SeriesConfig::Values { values } => {
                if values.len() != steps {
                    return Err(Error::Config(format!(
                        "series has {} values, expected {steps}",
                        values.len()
                    )));
                }
                values.clone()
            }
        })
    }
}

/// Spatial imprint: either explicit cell values or a random direction with
/// a given per-cell scale and optional cosine overlap with the target's.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImprintConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_with_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub coeff: f64,
    pub imprint: ImprintConfig,
}

impl EnsembleConfig {
    /// Materialize series and imprints into a concrete generator spec.
    /// Imprints are drawn deterministically from the scenario seed; the
    /// target's imprint is drawn first so anchors can overlap with it.
    pub fn to_scm_spec(&self) -> Result<ScmSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from_le_bytes(*b"loadings"));
        let target = self
            .forcings
            .iter()
            .find(|f| f.role == scm::ForcingRole::Target)
            .ok_or_else(|| Error::Config("ensemble needs a target forcing".into()))?;
        let target_loading = materialize_imprint(&target.imprint, self.cells, None, &mut rng)?;
        let mut forcings = Vec::new();
        for f in &self.forcings {
            let loading = if f.role == scm::ForcingRole::Target {
                target_loading.clone()
            } else {
                materialize_imprint(&f.imprint, self.cells, Some(&target_loading), &mut rng)?
            };
            let quadratic = match &f.quadratic {
                None => None,
                Some(qc) => Some(scm::QuadraticResponse {
                    coeff: qc.coeff,
                    loading: materialize_imprint(&qc.imprint, self.cells, Some(&target_loading), &mut rng)?,
                }),
            };
            forcings.push(scm::Forcing {
                name: f.name.clone(),
                role: f.role,
                series: f.series.materialize(self.steps)?,
                loading,
                quadratic,
            });
        }
        Ok(ScmSpec {
            cells: self.cells,
            steps: self.steps,
            noise_sigma: self.noise_sigma,
            noise_corr_len: self.noise_corr_len,
            seed: self.seed,
            forcings,
        })
    }
}

fn materialize_imprint(
    imprint: &ImprintConfig,
    cells: usize,
    target: Option<&Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if let Some(values) = &imprint.values {
        if values.len() != cells {
            return Err(Error::Config(format!(
                "imprint has {} values, expected {cells}",
                values.len()
            )));
        }
        return Ok(values.clone());
    }
    let scale = imprint
        .scale
        .ok_or_else(|| Error::Config("imprint needs either values or a scale".into()))?;
    match (imprint.overlap_with_target, target) {
        (Some(cos), Some(base)) => Ok(scm::loading_with_overlap(base, cos, scale, rng)),
        (Some(_), None) => Err(Error::Config("the target imprint cannot overlap itself".into())),
        (None, _) => Ok(scm::random_loading(cells, scale, rng)),
    }
}

/// A config violation: where and what.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Finding {
    pub path: String,
    pub message: String,
}

impl Finding {
    fn new(path: &str, message: impl Into<String>) -> Self {
        Finding {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))
}

/// All violations found without running anything. An unparseable file is an
/// error; everything else is reported as findings.
pub fn validate_config(config: &PipelineConfig) -> Vec<Finding> {
    let mut out = Vec::new();
    if config.schema_version != SCHEMA_VERSION {
        out.push(Finding::new(
            "schema_version",
            format!("unsupported schema version {}, expected {SCHEMA_VERSION}", config.schema_version),
        ));
    }
    if (config.weights[0] + config.weights[1] - 1.0).abs() > 1e-9 || config.weights.iter().any(|w| *w < 0.0) {
        out.push(Finding::new("weights", "weights must be non-negative and sum to 1"));
    }
    if !(config.alpha_star > 0.0 && config.alpha_star < 1.0) {
        out.push(Finding::new("alpha_star", "alpha_star must be in (0, 1)"));
    }
    if config.cv_folds < 2 {
        out.push(Finding::new("cv_folds", "need at least 2 folds"));
    }
    if config.subag_members == 0 {
        out.push(Finding::new("subag_members", "need at least 1 member"));
    }
    if config.window == 0 {
        out.push(Finding::new("window", "window must be at least 1"));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        out.push(Finding::new("train_fraction", "train_fraction must be in (0, 1)"));
    }
    if let Err(e) = AnchorBasis::from_names(&config.basis) {
        out.push(Finding::new("basis", e.to_string()));
    }
    if let Err(e) = config.grid.to_grid() {
        out.push(Finding::new("grid", e.to_string()));
    }
    if config.mode == Mode::Attribution && config.anchor_forcings.is_empty() {
        out.push(Finding::new("anchor_forcings", "attribution needs at least one anchor"));
    }
    if config.anchor_forcings.iter().any(|a| *a == config.target_forcing) {
        out.push(Finding::new(
            "anchor_forcings",
            "the target forcing cannot be its own anchor",
        ));
    }
    match (&config.data.manifest, &config.data.simulate) {
        (None, None) => out.push(Finding::new("data", "either a manifest or a simulation is required")),
        (Some(_), Some(_)) => out.push(Finding::new("data", "manifest and simulation are mutually exclusive")),
        (Some(path), None) => {
            match crate::dataset::load_manifest_models(path) {
                Ok(models) => {
                    if models < config.cv_folds {
                        out.push(Finding::new(
                            "cv_folds",
                            format!("{} folds requested for {models} models", config.cv_folds),
                        ));
                    }
                }
                Err(e) => out.push(Finding::new("data.manifest", e.to_string())),
            }
        }
        (None, Some(sim)) => {
            if let ScenarioConfig::Ensemble(ens) = sim {
                let names: Vec<&String> = ens.forcings.iter().map(|f| &f.name).collect();
                let mut unique = BTreeSet::new();
                for n in &names {
                    if !unique.insert((*n).clone()) {
                        out.push(Finding::new("data.simulate.forcings", format!("duplicate forcing '{n}'")));
                    }
                }
                let targets: Vec<&ForcingConfig> =
                    ens.forcings.iter().filter(|f| f.role == scm::ForcingRole::Target).collect();
                if targets.len() != 1 {
                    out.push(Finding::new(
                        "data.simulate.forcings",
                        format!("exactly one target forcing required, found {}", targets.len()),
                    ));
                } else if targets[0].name != config.target_forcing {
                    out.push(Finding::new(
                        "target_forcing",
                        format!("unknown target forcing '{}'", config.target_forcing),
                    ));
                }
                for a in &config.anchor_forcings {
                    let known = ens
                        .forcings
                        .iter()
                        .any(|f| f.name == *a && f.role == scm::ForcingRole::Anchor);
                    if !known {
                        out.push(Finding::new("anchor_forcings", format!("unknown anchor forcing '{a}'")));
                    }
                }
                let train_models =
                    (config.train_fraction * ens.models as f64).ceil() as usize;
                if train_models < config.cv_folds {
                    out.push(Finding::new(
                        "cv_folds",
                        format!("{} folds requested for {train_models} training models", config.cv_folds),
                    ));
                }
            }
        }
    }
    out
}

/// Materialize the configured data source into one dataset. The shift
/// scenarios concatenate their train and test halves; the model split of the
/// pipeline then reshuffles models.
pub fn materialize_dataset(config: &PipelineConfig) -> Result<Dataset> {
    let d = match (&config.data.manifest, &config.data.simulate) {
        (Some(path), None) => load_dataset(path)?,
        (None, Some(ScenarioConfig::Motivating { seed })) => {
            let (train, test) = scm::motivating_scenario(*seed)?;
            Dataset::concat(&[&train, &test])?
        }
        (None, Some(ScenarioConfig::Quadratic { seed })) => {
            let (train, test) = scm::quadratic_scenario(*seed)?;
            Dataset::concat(&[&train, &test])?
        }
        (None, Some(ScenarioConfig::Ensemble(ens))) => {
            let spec = ens.to_scm_spec()?;
            scm::generate_ensemble(&spec, ens.models, ens.forced_runs, ens.control_runs, &ens.interventions)?
        }
        _ => return Err(Error::Config("exactly one data source is required".into())),
    };
    Ok(match config.mode {
        Mode::Detection => d.without_anchors(),
        Mode::Attribution => d,
    })
}

fn subag_config(config: &PipelineConfig) -> Result<SubagConfig> {
    let grid = match config.mode {
        // detection fixes gamma to 1: plain ridge over the lambda grid
        Mode::Detection => Grid::new(vec![1.0], config.grid.to_grid()?.lambdas)?,
        Mode::Attribution => config.grid.to_grid()?,
    };
    Ok(SubagConfig {
        members: config.subag_members,
        folds: config.cv_folds,
        train_fraction: config.train_fraction,
        window: config.window,
        grid,
        basis: AnchorBasis::from_names(&config.basis)?,
        weights: config.weights,
        refit: config.refit,
        seed: config.seed,
    })
}

/// What `run` leaves on disk.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: TestReport,
}

/// Run the full pipeline and write every artifact under `out`:
/// the resolved config, the dataset digest, per-member selection tables,
/// the aggregated fingerprint, the diagnostics report, the test report, and
/// delimited-text plot data. Re-running with the same config and seed
/// reproduces every numeric field.
pub fn run_pipeline(config: &PipelineConfig, out: &Path, jobs: Option<usize>) -> Result<RunArtifacts> {
    let findings = validate_config(config);
    if !findings.is_empty() {
        let lines: Vec<String> = findings.iter().map(|f| format!("{}: {}", f.path, f.message)).collect();
        return Err(Error::Config(lines.join("; ")));
    }
    let dataset = materialize_dataset(config)?;
    let test_cfg = TestConfig {
        subag: subag_config(config)?,
        alpha_star: config.alpha_star,
        tails: config.tails,
        forcing_series: None,
        mi_bins: config.mi_bins,
    };
    let outcome = match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
            pool.install(|| full_test(&dataset, &test_cfg))?
        }
        None => full_test(&dataset, &test_cfg)?,
    };
    let report = outcome.report.clone();
    write_artifacts(config, &dataset, &outcome, out)?;
    Ok(RunArtifacts {
        dir: out.to_path_buf(),
        report,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetDigest {
    n: usize,
    p: usize,
    q: usize,
    runs: usize,
    models: usize,
    content_digest: String,
}

#[derive(Serialize, Deserialize)]
struct MemberSummary {
    member: usize,
    gamma: f64,
    lambda: f64,
    score: f64,
    preprocessing_digest: String,
    split_digest: String,
}

#[derive(Serialize, Deserialize)]
struct AggregateFingerprint {
    beta: Vec<f64>,
    basis: Vec<String>,
    members: Vec<MemberSummary>,
}

#[derive(Serialize, Deserialize)]
struct DiagnosticsArtifact {
    average: Option<DiagnosticsReport>,
    per_member: Vec<DiagnosticsReport>,
}

fn write_artifacts(config: &PipelineConfig, dataset: &Dataset, outcome: &TestOutcome, out: &Path) -> Result<()> {
    let staging = out.with_extension(format!("staging-{}", std::process::id()));
    let result = (|| -> Result<()> {
        fs::create_dir_all(staging.join("selection")).map_err(|e| io_err(&staging, e))?;
        fs::create_dir_all(staging.join("plots")).map_err(|e| io_err(&staging, e))?;

        write_json(&staging.join("config.json"), config)?;
        write_json(
            &staging.join("dataset_digest.json"),
            &DatasetDigest {
                n: dataset.n(),
                p: dataset.p(),
                q: dataset.q(),
                runs: dataset.runs().len(),
                models: dataset.model_ids().len(),
                content_digest: dataset.content_digest(),
            },
        )?;

        let mut summaries = Vec::new();
        for (i, member) in outcome.ensemble.members.iter().enumerate() {
            write_selection_table(&staging.join("selection").join(format!("member_{i:03}.tsv")), &member.table)?;
            summaries.push(MemberSummary {
                member: i,
                gamma: member.selected.gamma,
                lambda: member.selected.lambda,
                score: member.selected.score,
                preprocessing_digest: member.fingerprint.preprocessing.digest(),
                split_digest: member.split.digest(),
            });
        }
        write_json(&staging.join("selection").join("selected.json"), &summaries)?;

        let basis_names = outcome.ensemble.members[0].fingerprint.basis.names();
        write_json(
            &staging.join("fingerprint.json"),
            &AggregateFingerprint {
                beta: outcome.ensemble.aggregate_beta.iter().copied().collect(),
                basis: basis_names,
                members: summaries_reload(&staging)?,
            },
        )?;
        write_json(
            &staging.join("diagnostics.json"),
            &DiagnosticsArtifact {
                average: outcome.diagnostics.clone(),
                per_member: outcome.member_diagnostics.clone(),
            },
        )?;
        write_json(&staging.join("test_report.json"), &outcome.report)?;

        let mut per_model = String::from("model_id\talpha\tpower\n");
        for m in &outcome.report.per_model {
            per_model.push_str(&format!(
                "{}\t{}\t{}\n",
                m.model_id,
                m.alpha.map_or("-".into(), |v| format!("{v}")),
                m.power.map_or("-".into(), |v| format!("{v}")),
            ));
        }
        fs::write(staging.join("per_model.tsv"), per_model).map_err(|e| io_err(&staging, e))?;

        if let Some(scatter) = &outcome.scatter {
            let mut pred = String::from("y\tyhat\n");
            for (y, yh) in scatter.y.iter().zip(&scatter.yhat) {
                pred.push_str(&format!("{y}\t{yh}\n"));
            }
            fs::write(staging.join("plots").join("predictions.tsv"), pred).map_err(|e| io_err(&staging, e))?;
            let q = scatter.anchors.first().map_or(0, |a| a.len());
            let mut resid = String::from("residual");
            for j in 0..q {
                resid.push_str(&format!("\tanchor_{j}"));
            }
            resid.push('\n');
            for i in 0..scatter.y.len() {
                resid.push_str(&format!("{}", scatter.y[i] - scatter.yhat[i]));
                for j in 0..q {
                    resid.push_str(&format!("\t{}", scatter.anchors[i][j]));
                }
                resid.push('\n');
            }
            fs::write(staging.join("plots").join("residuals_vs_anchor.tsv"), resid).map_err(|e| io_err(&staging, e))?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => promote(&staging, out),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn summaries_reload(staging: &Path) -> Result<Vec<MemberSummary>> {
    let text = fs::read_to_string(staging.join("selection").join("selected.json"))
        .map_err(|e| io_err(staging, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)?;
    fs::write(path, body).map_err(|e| io_err(path, e))
}

fn write_selection_table(path: &Path, table: &ObjectiveTable) -> Result<()> {
    let anchored = table.entries.iter().any(|e| e.rmse_anchor_span.is_some());
    let mut out = String::new();
    if anchored {
        out.push_str("gamma\tlambda\trmse\trmse_anchor_span\n");
        for e in &table.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.gamma,
                e.lambda,
                e.rmse,
                e.rmse_anchor_span.unwrap()
            ));
        }
    } else {
        out.push_str("lambda\trmse\n");
        for e in &table.entries {
            out.push_str(&format!("{}\t{}\n", e.lambda, e.rmse));
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Move every staged artifact into place, overwriting existing files, so a
/// failed run never leaves a half-written artifact directory behind.
fn promote(staging: &Path, out: &Path) -> Result<()> {
    if !out.exists() {
        fs::create_dir_all(out.parent().unwrap_or(Path::new("."))).map_err(|e| io_err(out, e))?;
        return fs::rename(staging, out).map_err(|e| io_err(out, e));
    }
    fn walk(staging_root: &Path, from: &Path, to_root: &Path) -> Result<()> {
        for entry in fs::read_dir(from).map_err(|e| io_err(from, e))? {
            let entry = entry.map_err(|e| io_err(from, e))?;
            let src = entry.path();
            let rel = src.strip_prefix(staging_root).expect("inside staging");
            let dst = to_root.join(rel);
            if src.is_dir() {
                fs::create_dir_all(&dst).map_err(|e| io_err(&dst, e))?;
                walk(staging_root, &src, to_root)?;
            } else {
                fs::rename(&src, &dst).map_err(|e| io_err(&dst, e))?;
            }
        }
        Ok(())
    }
    walk(staging, staging, out)?;
    fs::remove_dir_all(staging).map_err(|e| io_err(staging, e))
}

/// Re-derive the diagnostics and plot data of a persisted run directory from
/// its stored config. Deterministic, so the rewritten files are
/// byte-identical to the originals.
pub fn regenerate_report(dir: &Path, jobs: Option<usize>) -> Result<RunArtifacts> {
    let config = load_config(&dir.join("config.json"))?;
    run_pipeline(&config, dir, jobs)
}

/// Single fingerprint at fixed hyperparameters on the full (preprocessed)
/// dataset; writes the fingerprint record and in-sample diagnostics.
pub fn fit_once(config: &PipelineConfig, gamma: f64, lambda: f64, out: &Path) -> Result<()> {
    let raw = materialize_dataset(config)?;
    let models = raw.model_ids();
    let d = preprocess_train(&raw, &models, config.window)?;
    let basis = AnchorBasis::from_names(&config.basis)?;
    let proj = build_projection(d.a(), &basis)?;
    let gamma = match config.mode {
        Mode::Detection => 1.0,
        Mode::Attribution => gamma,
    };
    let f = crate::anchor::fit(&d, &proj, HyperParams::new(gamma, lambda)?)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    f.to_record().save(&out.join("fingerprint.json"))?;
    let report = diagnostics::evaluate(&d, &f, config.mi_bins)?;
    write_json(&out.join("diagnostics.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct SelectArtifact {
    gamma: f64,
    lambda: f64,
    score: f64,
    dropped_objectives: Vec<usize>,
}

/// One train/test split, cross-validated grid sweep, and weighted-L2 choice;
/// writes the objective table and the chosen point. Uses the same derived
/// seeds as the first subag member.
pub fn select_once(config: &PipelineConfig, out: &Path) -> Result<Selection> {
    let raw = materialize_dataset(config)?;
    let scfg = subag_config(config)?;
    let (split_seed, fold_seed) = member_seeds(config.seed, 1)[0];
    let split = raw.split_models(split_seed, config.train_fraction)?;
    let train = preprocess_train(&raw, &split.train_models, config.window)?;
    let folds = kfold_groups(&split.train_models, config.cv_folds, fold_seed)?;
    let cv = cv_objectives(&train, &folds, &scfg.grid, &scfg.basis, config.weights)?;
    let selected = select_weighted_l2(&cv.table)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_selection_table(&out.join("objective_table.tsv"), &cv.table)?;
    write_json(
        &out.join("selected.json"),
        &SelectArtifact {
            gamma: selected.gamma,
            lambda: selected.lambda,
            score: selected.score,
            dropped_objectives: selected.dropped_objectives.clone(),
        },
    )?;
    Ok(selected)
}

/// Materialize the configured scenario and write it in the manifest format.
/// Shift scenarios produce `train/` and `test/` subdirectories; ensembles a
/// single manifest.
pub fn simulate_to_dir(config: &PipelineConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let sim = config
        .data
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("config has no simulation to materialize".into()))?;
    let mut written = Vec::new();
    match sim {
        ScenarioConfig::Motivating { seed } => {
            let (train, test) = scm::motivating_scenario(*seed)?;
            written.push(save_dataset(&train, &out.join("train"))?);
            written.push(save_dataset(&test, &out.join("test"))?);
        }
        ScenarioConfig::Quadratic { seed } => {
            let (train, test) = scm::quadratic_scenario(*seed)?;
            written.push(save_dataset(&train, &out.join("train"))?);
            written.push(save_dataset(&test, &out.join("test"))?);
        }
        ScenarioConfig::Ensemble(ens) => {
            let spec = ens.to_scm_spec()?;
            let d = scm::generate_ensemble(&spec, ens.models, ens.forced_runs, ens.control_runs, &ens.interventions)?;
            written.push(save_dataset(&d, out)?);
        }
    }
    Ok(written)
}

/// Aggregate fingerprint as stored in a run directory.
pub fn load_aggregate_beta(dir: &Path) -> Result<DVector<f64>> {
    let text = fs::read_to_string(dir.join("fingerprint.json")).map_err(|e| io_err(dir, e))?;
    let agg: AggregateFingerprint = serde_json::from_str(&text)?;
    Ok(DVector::from_vec(agg.beta))
}
