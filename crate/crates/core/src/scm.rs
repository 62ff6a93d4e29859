//! Synthetic structural-causal-model data generator.
//!
//! Each run is built as `X_t = sum_f loading_f * g_f(F_f(t)) + eps_t` with
//! spatially correlated Gaussian noise (squared-exponential covariance over a
//! 1-D grid of cells, white in time). `g_f` is the identity, plus an optional
//! quadratic response channel with its own spatial imprint. The target
//! forcing series becomes `Y`, the anchor forcing series become the columns
//! of `A`. Control runs zero every forcing series. Everything is
//! deterministic per (spec, stream): runs can be generated in parallel.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, RunKind, RunMeta};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingRole {
    Target,
    Anchor,
}

/// Optional nonlinear response channel: the forcing value `v` also enters as
/// `coeff * v^2` through a separate spatial imprint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadraticResponse {
    pub coeff: f64,
    pub loading: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Forcing {
    pub name: String,
    pub role: ForcingRole,
    /// Exogenous driver series, one value per time step.
    pub series: Vec<f64>,
    /// Spatial imprint of the linear response, one value per cell.
    pub loading: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticResponse>,
}

/// Structural description of the generator: forcings with imprints, noise
/// model, and the seed all runs derive from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScmSpec {
    /// Spatial dimension p.
    pub cells: usize,
    /// Steps per run u.
    pub steps: usize,
    pub noise_sigma: f64,
    /// Correlation length of the noise in grid cells.
    pub noise_corr_len: f64,
    pub seed: u64,
    pub forcings: Vec<Forcing>,
}

/// Shift or scale intervention on an anchor forcing. `applies_to` tags which
/// phase of a scenario the intervention belongs to; `generate` applies every
/// intervention it is handed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Intervention {
    pub forcing: String,
    pub kind: InterventionKind,
    pub magnitude: f64,
    #[serde(default)]
    pub applies_to: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Shift,
    Scale,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Train,
    Test,
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("cells and steps must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        if !(self.noise_corr_len > 0.0) {
            return Err(Error::InvalidArgument("noise_corr_len must be positive".into()));
        }
        let targets = self.forcings.iter().filter(|f| f.role == ForcingRole::Target).count();
        let anchors = self.forcings.iter().filter(|f| f.role == ForcingRole::Anchor).count();
        if targets != 1 {
            return Err(Error::InvalidArgument(format!(
                "spec needs exactly one target forcing, found {targets}"
            )));
        }
        if anchors == 0 {
            return Err(Error::InvalidArgument("spec needs at least one anchor forcing".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for f in &self.forcings {
            if !names.insert(f.name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate forcing name '{}'", f.name)));
            }
            if f.series.len() != self.steps {
                return Err(Error::InvalidArgument(format!(
                    "forcing '{}' has {} series values, expected {}",
                    f.name,
                    f.series.len(),
                    self.steps
                )));
            }
            if f.loading.len() != self.cells {
                return Err(Error::InvalidArgument(format!(
                    "forcing '{}' has {} loading values, expected {}",
                    f.name,
                    f.loading.len(),
                    self.cells
                )));
            }
            if let Some(quad) = &f.quadratic {
                if quad.loading.len() != self.cells {
                    return Err(Error::InvalidArgument(format!(
                        "forcing '{}' quadratic loading has {} values, expected {}",
                        f.name,
                        quad.loading.len(),
                        self.cells
                    )));
                }
            }
            if f.series.iter().chain(f.loading.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("forcing '{}' has non-finite values", f.name)));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> &Forcing {
        self.forcings
            .iter()
            .find(|f| f.role == ForcingRole::Target)
            .expect("validated spec has a target")
    }

    pub fn anchors(&self) -> Vec<&Forcing> {
        self.forcings.iter().filter(|f| f.role == ForcingRole::Anchor).collect()
    }

    fn check_interventions(&self, interventions: &[Intervention]) -> Result<()> {
        for iv in interventions {
            let f = self
                .forcings
                .iter()
                .find(|f| f.name == iv.forcing)
                .ok_or_else(|| Error::InvalidArgument(format!("intervention on unknown forcing '{}'", iv.forcing)))?;
            if f.role == ForcingRole::Target {
                return Err(Error::InvalidArgument(format!(
                    "intervention on target forcing '{}' is not allowed",
                    iv.forcing
                )));
            }
        }
        Ok(())
    }

    /// Lower-triangular factor of the spatial noise covariance
    /// sigma^2 exp(-(i-j)^2 / (2 l^2)), with a small nugget for stability.
    fn noise_factor(&self) -> Option<Cholesky<f64, nalgebra::Dyn>> {
        if self.noise_sigma == 0.0 {
            return None;
        }
        let p = self.cells;
        let s2 = self.noise_sigma * self.noise_sigma;
        let l2 = self.noise_corr_len * self.noise_corr_len;
        let mut c = DMatrix::from_fn(p, p, |i, j| {
            let d = i as f64 - j as f64;
            s2 * (-d * d / (2.0 * l2)).exp()
        });
        for i in 0..p {
            c[(i, i)] += 1e-10 * s2;
        }
        Some(Cholesky::new(c).expect("noise covariance is positive definite"))
    }
}

/// Effective per-run forcing series after interventions (and zeroing for
/// control runs).
fn effective_series(spec: &ScmSpec, kind: RunKind, interventions: &[Intervention]) -> Vec<Vec<f64>> {
    spec.forcings
        .iter()
        .map(|f| {
            if kind == RunKind::Control {
                return vec![0.0; spec.steps];
            }
            let mut s = f.series.clone();
            for iv in interventions.iter().filter(|iv| iv.forcing == f.name) {
                for v in s.iter_mut() {
                    match iv.kind {
                        InterventionKind::Shift => *v += iv.magnitude,
                        InterventionKind::Scale => *v *= iv.magnitude,
                    }
                }
            }
            s
        })
        .collect()
}

/// Generate one run's matrices from its derived noise stream.
fn simulate_run(
    spec: &ScmSpec,
    chol: &Option<Cholesky<f64, nalgebra::Dyn>>,
    stream: u64,
    kind: RunKind,
    interventions: &[Intervention],
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (u, p) = (spec.steps, spec.cells);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    // Noise is drawn first and depends only on the stream, never on the
    // forcing values, so runs differing only in forcings share their noise.
    let mut x = DMatrix::from_fn(u, p, |_, _| rng.sample(StandardNormal));
    match chol {
        Some(c) => x = x * c.l().transpose(),
        None => x.fill(0.0),
    }
    let series = effective_series(spec, kind, interventions);
    for (f, s) in spec.forcings.iter().zip(series.iter()) {
        for t in 0..u {
            let v = s[t];
            for j in 0..p {
                x[(t, j)] += f.loading[j] * v;
            }
            if let Some(quad) = &f.quadratic {
                let vq = quad.coeff * v * v;
                for j in 0..p {
                    x[(t, j)] += quad.loading[j] * vq;
                }
            }
        }
    }
    let target_idx = spec
        .forcings
        .iter()
        .position(|f| f.role == ForcingRole::Target)
        .expect("validated spec has a target");
    let y = DVector::from_fn(u, |t, _| series[target_idx][t]);
    let anchor_cols: Vec<usize> = spec
        .forcings
        .iter()
        .enumerate()
        .filter(|(_, f)| f.role == ForcingRole::Anchor)
        .map(|(i, _)| i)
        .collect();
    let a = DMatrix::from_fn(u, anchor_cols.len(), |t, j| series[anchor_cols[j]][t]);
    (x, y, a)
}

fn run_stream(model: usize, kind: RunKind, run: usize) -> u64 {
    let kind_bit: u64 = match kind {
        RunKind::Forced => 1,
        RunKind::Control => 2,
    };
    ((model as u64) << 32) | (kind_bit << 24) | run as u64
}

/// Generate `runs` runs of the given kind, one synthetic model per run.
pub fn generate(spec: &ScmSpec, runs: usize, kind: RunKind, interventions: &[Intervention]) -> Result<Dataset> {
    spec.validate()?;
    spec.check_interventions(interventions)?;
    if runs == 0 {
        return Err(Error::InvalidArgument("need at least one run".into()));
    }
    let chol = spec.noise_factor();
    let blocks = (0..runs)
        .map(|r| {
            let (x, y, a) = simulate_run(spec, &chol, run_stream(r, kind, 0), kind, interventions);
            let meta = RunMeta {
                model_id: format!("{kind}-{r:03}"),
                run_id: "r0".into(),
                kind,
                n_steps: spec.steps,
            };
            (meta, x, y, a)
        })
        .collect();
    Dataset::from_runs(blocks)
}

/// Generate a multi-model ensemble: `models` synthetic models, each with
/// `forced_runs` forced and `control_runs` control runs.
pub fn generate_ensemble(
    spec: &ScmSpec,
    models: usize,
    forced_runs: usize,
    control_runs: usize,
    interventions: &[Intervention],
) -> Result<Dataset> {
    spec.validate()?;
    spec.check_interventions(interventions)?;
    if models == 0 || forced_runs + control_runs == 0 {
        return Err(Error::InvalidArgument("ensemble needs models and runs".into()));
    }
    let chol = spec.noise_factor();
    let mut blocks = Vec::new();
    for m in 0..models {
        let model_id = format!("model-{m:02}");
        for r in 0..forced_runs {
            let (x, y, a) = simulate_run(spec, &chol, run_stream(m, RunKind::Forced, r), RunKind::Forced, interventions);
            blocks.push((
                RunMeta {
                    model_id: model_id.clone(),
                    run_id: format!("forced-{r}"),
                    kind: RunKind::Forced,
                    n_steps: spec.steps,
                },
                x,
                y,
                a,
            ));
        }
        for r in 0..control_runs {
            let (x, y, a) = simulate_run(spec, &chol, run_stream(m, RunKind::Control, r), RunKind::Control, interventions);
            blocks.push((
                RunMeta {
                    model_id: model_id.clone(),
                    run_id: format!("control-{r}"),
                    kind: RunKind::Control,
                    n_steps: spec.steps,
                },
                x,
                y,
                a,
            ));
        }
    }
    Dataset::from_runs(blocks)
}

/// Radiative forcing of a solar-constant change under planetary albedo:
/// `delta_s0 * (1 - albedo) / 4`.
pub fn solar_radiative_forcing(delta_s0: f64, albedo: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&albedo) {
        return Err(Error::InvalidArgument(format!("albedo must be in [0, 1), got {albedo}")));
    }
    Ok(delta_s0 * (1.0 - albedo) / 4.0)
}

/// Forcing series shaped like 1%-per-step compounding CO2: the implied
/// radiative forcing grows linearly, reaching about 7.4 at step 140.
pub fn co2_ramp_series(steps: usize) -> Vec<f64> {
    let rate = 5.35 * 1.01f64.ln();
    (1..=steps).map(|t| rate * t as f64).collect()
}

pub fn sinusoid_series(steps: usize, amplitude: f64, period: f64) -> Vec<f64> {
    (0..steps)
        .map(|t| amplitude * (2.0 * std::f64::consts::PI * t as f64 / period).sin())
        .collect()
}

pub fn constant_series(steps: usize, value: f64) -> Vec<f64> {
    vec![value; steps]
}

/// A random spatial imprint with per-cell magnitudes of order `scale`.
pub fn random_loading(cells: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v = DVector::from_fn(cells, |_, _| rng.sample::<f64, _>(StandardNormal));
    let unit = v.scale(1.0 / v.norm());
    unit.scale(scale * (cells as f64).sqrt()).iter().copied().collect()
}

/// An imprint whose direction has the given cosine similarity with `base`.
pub fn loading_with_overlap(base: &[f64], cosine: f64, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cells = base.len();
    let b = DVector::from_column_slice(base);
    let b_unit = b.scale(1.0 / b.norm());
    let mut v = DVector::from_fn(cells, |_, _| rng.sample::<f64, _>(StandardNormal));
    let along = b_unit.dot(&v);
    v -= b_unit.scale(along);
    let v_unit = v.scale(1.0 / v.norm());
    let dir = b_unit.scale(cosine) + v_unit.scale((1.0 - cosine * cosine).sqrt());
    dir.scale(scale * (cells as f64).sqrt()).iter().copied().collect()
}

const SCENARIO_CELLS: usize = 200;
const SCENARIO_STEPS: usize = 140;
const SCENARIO_NOISE_SIGMA: f64 = 1.0;
const SCENARIO_NOISE_CORR_LEN: f64 = 5.0;
const SCENARIO_TARGET_SCALE: f64 = 0.05;
const SCENARIO_ANCHOR_SCALE: f64 = 0.08;
const SCENARIO_OVERLAP: f64 = 0.5;
const ALBEDO: f64 = 0.3;

fn scenario_spec(seed: u64, quadratic_anchor: bool) -> ScmSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(*b"loadings"));
    let target_loading = random_loading(SCENARIO_CELLS, SCENARIO_TARGET_SCALE, &mut rng);
    let anchor_loading = loading_with_overlap(&target_loading, SCENARIO_OVERLAP, SCENARIO_ANCHOR_SCALE, &mut rng);
    let (series, quadratic) = if quadratic_anchor {
        let quad_loading = loading_with_overlap(&target_loading, SCENARIO_OVERLAP, SCENARIO_ANCHOR_SCALE, &mut rng);
        (
            sinusoid_series(SCENARIO_STEPS, 3.0, 16.7),
            Some(QuadraticResponse {
                coeff: 0.5,
                loading: quad_loading,
            }),
        )
    } else {
        (constant_series(SCENARIO_STEPS, 0.0), None)
    };
    ScmSpec {
        cells: SCENARIO_CELLS,
        steps: SCENARIO_STEPS,
        noise_sigma: SCENARIO_NOISE_SIGMA,
        noise_corr_len: SCENARIO_NOISE_CORR_LEN,
        seed,
        forcings: vec![
            Forcing {
                name: "co2".into(),
                role: ForcingRole::Target,
                series: co2_ramp_series(SCENARIO_STEPS),
                loading: target_loading,
                quadratic: None,
            },
            Forcing {
                name: "solar".into(),
                role: ForcingRole::Anchor,
                series,
                loading: anchor_loading,
                quadratic,
            },
        ],
    }
}

/// Assemble one phase of a shift scenario: per anchor state, `forced_runs`
/// target-driven runs plus one baseline run without the target forcing (the
/// attribution null: anchors stay active).
fn shift_phase(
    spec: &ScmSpec,
    phase: Phase,
    states: &[(String, f64)],
    forced_runs: usize,
) -> Result<Dataset> {
    let chol = spec.noise_factor();
    let phase_bits: u64 = match phase {
        Phase::Train => 1 << 40,
        Phase::Test => 2 << 40,
    };
    let mut baseline = spec.clone();
    for f in baseline.forcings.iter_mut() {
        if f.role == ForcingRole::Target {
            f.series = vec![0.0; spec.steps];
        }
    }
    let mut blocks = Vec::new();
    for (si, (model_id, shift)) in states.iter().enumerate() {
        let iv = [Intervention {
            forcing: "solar".into(),
            kind: InterventionKind::Shift,
            magnitude: *shift,
            applies_to: phase,
        }];
        for r in 0..forced_runs {
            let stream = phase_bits | run_stream(si, RunKind::Forced, r);
            let (x, y, a) = simulate_run(spec, &chol, stream, RunKind::Forced, &iv);
            blocks.push((
                RunMeta {
                    model_id: model_id.clone(),
                    run_id: format!("r{r}"),
                    kind: RunKind::Forced,
                    n_steps: spec.steps,
                },
                x,
                y,
                a,
            ));
        }
        let stream = phase_bits | run_stream(si, RunKind::Control, 0);
        let (x, y, a) = simulate_run(&baseline, &chol, stream, RunKind::Forced, &iv);
        blocks.push((
            RunMeta {
                model_id: model_id.clone(),
                run_id: "baseline".into(),
                kind: RunKind::Control,
                n_steps: spec.steps,
            },
            x,
            y,
            a,
        ));
    }
    Dataset::from_runs(blocks)
}

/// The shift-intervention benchmark: the target forcing ramps like
/// compounding CO2 while a solar-like anchor sits at weak states
/// (+-6 units on the solar constant) in training and at states more than
/// four times stronger (+-25) in testing. The anchor imprint partially
/// overlaps the target imprint, so a plain ridge fit inherits an anchor
/// sensitivity that only shows once the anchor leaves its training range.
/// Returns (train, test).
pub fn motivating_scenario(seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = scenario_spec(seed, false);
    let weak = solar_radiative_forcing(6.0, ALBEDO)?;
    let strong = solar_radiative_forcing(25.0, ALBEDO)?;
    let train_states = vec![
        ("solar-cool".to_string(), -weak),
        ("solar-calm".to_string(), 0.0),
        ("solar-warm".to_string(), weak),
    ];
    let test_states = vec![
        ("solar-cold".to_string(), -strong),
        ("solar-base".to_string(), 0.0),
        ("solar-hot".to_string(), strong),
    ];
    let train = shift_phase(&spec, Phase::Train, &train_states, 2)?;
    let test = shift_phase(&spec, Phase::Test, &test_states, 2)?;
    Ok((train, test))
}

/// Variant where the anchor acts through both a linear and a quadratic
/// response channel with distinct imprints, so residuals of a fit protected
/// only against the linear anchor stay mean-dependent on the anchor.
/// Returns (train, test).
pub fn quadratic_scenario(seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = scenario_spec(seed, true);
    let states: Vec<(String, f64)> = vec![("qm-a", 0.0), ("qm-b", 0.0), ("qm-c", 0.0), ("qm-d", 0.0)]
        .into_iter()
        .map(|(m, s)| (m.to_string(), s))
        .collect();
    let train = shift_phase(&spec, Phase::Train, &states, 1)?;
    let test = shift_phase(&spec, Phase::Test, &states, 1)?;
    Ok((train, test))
}
