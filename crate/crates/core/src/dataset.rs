//! Data model, ingestion, preprocessing, and group-aware splitting.
//!
//! A [`Dataset`] stacks one row per (run, time step): the climate field `X`
//! (n x p), the target forcing `Y` (n), and the anchor forcings `A` (n x q).
//! All preprocessing operations return a new dataset and record what they did
//! in a [`PreprocessingState`], so that test data can be transformed with the
//! statistics fitted on training data and so that double application is
//! rejected rather than silently compounded.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Whether a run was driven with the target forcing or is unforced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Forced,
    Control,
}

impl std::fmt::Display for RunKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunKind::Forced => write!(f, "forced"),
            RunKind::Control => write!(f, "control"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub model_id: String,
    pub run_id: String,
    pub kind: RunKind,
    pub n_steps: usize,
}

/// Record of the preprocessing applied to a dataset. The column statistics
/// are reused verbatim when transforming held-out data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PreprocessingState {
    /// Window length used by `center_runs`, if applied.
    pub run_window: Option<usize>,
    /// Per-run column means subtracted by `center_runs` (one per run, in run
    /// order). These describe this dataset only and are excluded from the
    /// digest: fresh runs are always centered on their own first window.
    pub run_means: Vec<DVector<f64>>,
    /// Column means subtracted by `standardize`.
    pub x_center: Option<DVector<f64>>,
    /// Column scale divisors applied by `standardize` (1.0 for flagged columns).
    pub x_scale: Option<DVector<f64>>,
    /// Columns with zero variance after centering; forced to zero.
    pub zero_variance: Vec<usize>,
    /// Target mean subtracted by `center_targets`.
    pub y_mean: Option<f64>,
    /// Anchor column means subtracted by `center_targets`.
    pub a_means: Option<DVector<f64>>,
    /// Set for synthetic data constructed already centered; regression entry
    /// points accept such datasets without the full preprocessing chain.
    pub declared_centered: bool,
}

impl PreprocessingState {
    pub fn is_run_centered(&self) -> bool {
        self.run_window.is_some()
    }

    pub fn is_standardized(&self) -> bool {
        self.x_scale.is_some()
    }

    pub fn is_target_centered(&self) -> bool {
        self.y_mean.is_some()
    }

    /// True when the data is in the zero-mean, scaled form the regression
    /// operations expect.
    pub fn is_regression_ready(&self) -> bool {
        self.declared_centered || (self.is_standardized() && self.is_target_centered())
    }

    /// Hex digest of the transformation parameters (not the data). Two
    /// datasets preprocessed with the same statistics share a digest.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.declared_centered as u8]);
        h.update(self.run_window.unwrap_or(0).to_le_bytes());
        let mut update_vec = |tag: u8, v: Option<&DVector<f64>>| {
            h.update([tag]);
            if let Some(v) = v {
                for x in v.iter() {
                    h.update(x.to_le_bytes());
                }
            }
        };
        update_vec(1, self.x_center.as_ref());
        update_vec(2, self.x_scale.as_ref());
        update_vec(3, self.a_means.as_ref());
        h.update([4]);
        if let Some(m) = self.y_mean {
            h.update(m.to_le_bytes());
        }
        h.update([5]);
        for &j in &self.zero_variance {
            h.update(j.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sample matrices plus per-row run bookkeeping.
#[derive(Clone, Debug)]
pub struct Dataset {
    runs: Vec<RunMeta>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    a: DMatrix<f64>,
    /// (run index, step within the run) per row.
    rows: Vec<(usize, usize)>,
    preprocessing: PreprocessingState,
}

impl Dataset {
    /// Assemble a dataset from per-run blocks. All runs must have the same
    /// column counts and the same length, and (model_id, run_id) must be
    /// unique.
    pub fn from_runs(blocks: Vec<(RunMeta, DMatrix<f64>, DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one run".into()));
        }
        let p = blocks[0].1.ncols();
        let q = blocks[0].3.ncols();
        let steps = blocks[0].0.n_steps;
        let mut seen = BTreeSet::new();
        for (meta, xb, yb, ab) in &blocks {
            if meta.n_steps == 0 {
                return Err(Error::Run {
                    model_id: meta.model_id.clone(),
                    run_id: meta.run_id.clone(),
                    message: "run has zero steps".into(),
                });
            }
            if meta.n_steps != steps {
                return Err(Error::Run {
                    model_id: meta.model_id.clone(),
                    run_id: meta.run_id.clone(),
                    message: format!("run length {} differs from common length {}", meta.n_steps, steps),
                });
            }
            if xb.nrows() != meta.n_steps || yb.len() != meta.n_steps || ab.nrows() != meta.n_steps {
                return Err(Error::Run {
                    model_id: meta.model_id.clone(),
                    run_id: meta.run_id.clone(),
                    message: "matrix row counts disagree with n_steps".into(),
                });
            }
            if xb.ncols() != p {
                return Err(Error::Run {
                    model_id: meta.model_id.clone(),
                    run_id: meta.run_id.clone(),
                    message: format!("x has {} columns, expected {}", xb.ncols(), p),
                });
            }
            if ab.ncols() != q {
                return Err(Error::Run {
                    model_id: meta.model_id.clone(),
                    run_id: meta.run_id.clone(),
                    message: format!("a has {} columns, expected {}", ab.ncols(), q),
                });
            }
            if !seen.insert((meta.model_id.clone(), meta.run_id.clone())) {
                return Err(Error::Run {
                    model_id: meta.model_id.clone(),
                    run_id: meta.run_id.clone(),
                    message: "duplicate (model_id, run_id)".into(),
                });
            }
        }
        let n: usize = blocks.iter().map(|b| b.0.n_steps).sum();
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut a = DMatrix::zeros(n, q);
        let mut rows = Vec::with_capacity(n);
        let mut runs = Vec::with_capacity(blocks.len());
        let mut at = 0usize;
        for (i, (meta, xb, yb, ab)) in blocks.into_iter().enumerate() {
            let len = meta.n_steps;
            x.rows_mut(at, len).copy_from(&xb);
            y.rows_mut(at, len).copy_from(&yb);
            a.rows_mut(at, len).copy_from(&ab);
            for t in 0..len {
                rows.push((i, t));
            }
            runs.push(meta);
            at += len;
        }
        Ok(Dataset {
            runs,
            x,
            y,
            a,
            rows,
            preprocessing: PreprocessingState::default(),
        })
    }

    /// Wrap already-centered matrices as a single synthetic run. Intended for
    /// toy problems and tests; the result is accepted by the regression
    /// entry points without further preprocessing.
    pub fn from_centered_matrices(x: DMatrix<f64>, y: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n || a.nrows() != n {
            return Err(Error::Dimension(format!(
                "row counts disagree: x {} rows, y {} rows, a {} rows",
                n,
                y.len(),
                a.nrows()
            )));
        }
        let meta = RunMeta {
            model_id: "synthetic".into(),
            run_id: "r0".into(),
            kind: RunKind::Forced,
            n_steps: n,
        };
        let mut d = Dataset::from_runs(vec![(meta, x, y, a)])?;
        d.preprocessing.declared_centered = true;
        Ok(d)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.a.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn runs(&self) -> &[RunMeta] {
        &self.runs
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn preprocessing(&self) -> &PreprocessingState {
        &self.preprocessing
    }

    pub fn is_regression_ready(&self) -> bool {
        self.preprocessing.is_regression_ready()
    }

    /// Row range occupied by run `i`.
    pub fn run_range(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.runs[..i].iter().map(|r| r.n_steps).sum();
        start..start + self.runs[i].n_steps
    }

    pub fn model_ids(&self) -> BTreeSet<String> {
        self.runs.iter().map(|r| r.model_id.clone()).collect()
    }

    /// Keep only the runs whose model id is in `models`.
    pub fn subset_by_models(&self, models: &BTreeSet<String>) -> Result<Dataset> {
        self.subset(|meta| models.contains(&meta.model_id))
    }

    pub fn subset_by_kind(&self, kind: RunKind) -> Result<Dataset> {
        self.subset(|meta| meta.kind == kind)
    }

    fn subset(&self, keep: impl Fn(&RunMeta) -> bool) -> Result<Dataset> {
        let mut blocks = Vec::new();
        let mut kept_means = Vec::new();
        for (i, meta) in self.runs.iter().enumerate() {
            if !keep(meta) {
                continue;
            }
            let range = self.run_range(i);
            blocks.push((
                meta.clone(),
                self.x.rows(range.start, meta.n_steps).into_owned(),
                self.y.rows(range.start, meta.n_steps).into_owned(),
                self.a.rows(range.start, meta.n_steps).into_owned(),
            ));
            if let Some(m) = self.preprocessing.run_means.get(i) {
                kept_means.push(m.clone());
            }
        }
        let mut d = Dataset::from_runs(blocks)?;
        d.preprocessing = self.preprocessing.clone();
        d.preprocessing.run_means = kept_means;
        Ok(d)
    }

    /// Concatenate datasets with identical column counts and preprocessing
    /// states.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("nothing to concatenate".into()));
        }
        let state = &parts[0].preprocessing;
        for d in parts {
            if d.preprocessing != *state && d.preprocessing.run_means.is_empty() == state.run_means.is_empty() {
                return Err(Error::Preprocessing(
                    "cannot concatenate datasets with different preprocessing".into(),
                ));
            }
        }
        let mut blocks = Vec::new();
        let mut means = Vec::new();
        for d in parts {
            for (i, meta) in d.runs.iter().enumerate() {
                let range = d.run_range(i);
                blocks.push((
                    meta.clone(),
                    d.x.rows(range.start, meta.n_steps).into_owned(),
                    d.y.rows(range.start, meta.n_steps).into_owned(),
                    d.a.rows(range.start, meta.n_steps).into_owned(),
                ));
                if let Some(m) = d.preprocessing.run_means.get(i) {
                    means.push(m.clone());
                }
            }
        }
        let mut out = Dataset::from_runs(blocks)?;
        out.preprocessing = state.clone();
        out.preprocessing.run_means = means;
        Ok(out)
    }

    /// Subtract, for every run and every column of X, the mean of that
    /// column over the run's first `window` steps.
    pub fn center_runs(&self, window: usize) -> Result<Dataset> {
        if self.preprocessing.is_run_centered() {
            return Err(Error::Preprocessing("center_runs already applied".into()));
        }
        if window == 0 {
            return Err(Error::InvalidArgument("window must be at least 1".into()));
        }
        if let Some(short) = self.runs.iter().find(|r| r.n_steps < window) {
            return Err(Error::Run {
                model_id: short.model_id.clone(),
                run_id: short.run_id.clone(),
                message: format!("window {} exceeds run length {}", window, short.n_steps),
            });
        }
        let mut out = self.clone();
        let mut means = Vec::with_capacity(self.runs.len());
        for (i, meta) in self.runs.iter().enumerate() {
            let range = self.run_range(i);
            let head = self.x.rows(range.start, window);
            let mean = head.row_mean().transpose();
            for r in range.clone() {
                for j in 0..self.p() {
                    out.x[(r, j)] -= mean[j];
                }
            }
            means.push(mean);
            let _ = meta;
        }
        out.preprocessing.run_window = Some(window);
        out.preprocessing.run_means = means;
        Ok(out)
    }

    /// Center each column of X to mean zero and rescale to unit sample
    /// standard deviation, recording the statistics for reuse. Columns with
    /// zero variance are forced to zero and flagged.
    pub fn standardize(&self) -> Result<Dataset> {
        if self.preprocessing.is_standardized() {
            return Err(Error::Preprocessing("standardize already applied".into()));
        }
        if !self.preprocessing.is_run_centered() {
            return Err(Error::Preprocessing("standardize requires center_runs first".into()));
        }
        if self.n() < 2 {
            return Err(Error::InvalidArgument("standardize needs at least 2 rows".into()));
        }
        let n = self.n() as f64;
        let mut center = DVector::zeros(self.p());
        let mut scale = DVector::from_element(self.p(), 1.0);
        let mut flagged = Vec::new();
        let mut out = self.clone();
        for j in 0..self.p() {
            let col = self.x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            center[j] = mean;
            if sd <= 1e-12 * (1.0 + mean.abs()) {
                flagged.push(j);
                for r in 0..self.n() {
                    out.x[(r, j)] = 0.0;
                }
            } else {
                scale[j] = sd;
                for r in 0..self.n() {
                    out.x[(r, j)] = (self.x[(r, j)] - mean) / sd;
                }
            }
        }
        out.preprocessing.x_center = Some(center);
        out.preprocessing.x_scale = Some(scale);
        out.preprocessing.zero_variance = flagged;
        Ok(out)
    }

    /// Apply the column statistics recorded in `stats` (fitted elsewhere)
    /// instead of this dataset's own.
    pub fn standardize_with(&self, stats: &PreprocessingState) -> Result<Dataset> {
        if self.preprocessing.is_standardized() {
            return Err(Error::Preprocessing("standardize already applied".into()));
        }
        if !self.preprocessing.is_run_centered() {
            return Err(Error::Preprocessing("standardize requires center_runs first".into()));
        }
        let (center, scale) = match (&stats.x_center, &stats.x_scale) {
            (Some(c), Some(s)) => (c, s),
            _ => return Err(Error::Preprocessing("given state has no column statistics".into())),
        };
        if center.len() != self.p() {
            return Err(Error::Dimension(format!(
                "statistics for {} columns applied to {} columns",
                center.len(),
                self.p()
            )));
        }
        let mut out = self.clone();
        for j in 0..self.p() {
            for r in 0..self.n() {
                out.x[(r, j)] = (self.x[(r, j)] - center[j]) / scale[j];
            }
        }
        for &j in &stats.zero_variance {
            for r in 0..self.n() {
                out.x[(r, j)] = 0.0;
            }
        }
        out.preprocessing.x_center = Some(center.clone());
        out.preprocessing.x_scale = Some(scale.clone());
        out.preprocessing.zero_variance = stats.zero_variance.clone();
        Ok(out)
    }

    /// Center Y and each anchor column to mean zero, recording the means.
    pub fn center_targets(&self) -> Result<Dataset> {
        if self.preprocessing.is_target_centered() {
            return Err(Error::Preprocessing("center_targets already applied".into()));
        }
        let n = self.n() as f64;
        let y_mean = self.y.sum() / n;
        let a_means = DVector::from_fn(self.q(), |j, _| self.a.column(j).sum() / n);
        self.apply_target_centering(y_mean, a_means)
    }

    /// Center Y and A with means recorded in `stats`.
    pub fn center_targets_with(&self, stats: &PreprocessingState) -> Result<Dataset> {
        if self.preprocessing.is_target_centered() {
            return Err(Error::Preprocessing("center_targets already applied".into()));
        }
        let (y_mean, a_means) = match (&stats.y_mean, &stats.a_means) {
            (Some(y), Some(a)) => (*y, a.clone()),
            _ => return Err(Error::Preprocessing("given state has no target statistics".into())),
        };
        if a_means.len() != self.q() {
            return Err(Error::Dimension(format!(
                "anchor means for {} columns applied to {} columns",
                a_means.len(),
                self.q()
            )));
        }
        self.apply_target_centering(y_mean, a_means)
    }

    fn apply_target_centering(&self, y_mean: f64, a_means: DVector<f64>) -> Result<Dataset> {
        let mut out = self.clone();
        for r in 0..self.n() {
            out.y[r] -= y_mean;
            for j in 0..self.q() {
                out.a[(r, j)] -= a_means[j];
            }
        }
        out.preprocessing.y_mean = Some(y_mean);
        out.preprocessing.a_means = Some(a_means);
        Ok(out)
    }

    /// Random partition of the model ids. Train side gets
    /// ceil(train_fraction * #models) models; deterministic for a given seed.
    pub fn split_models(&self, seed: u64, train_fraction: f64) -> Result<GroupSplit> {
        let models: Vec<String> = self.model_ids().into_iter().collect();
        if models.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "split needs at least 2 models, found {}",
                models.len()
            )));
        }
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::InvalidArgument("train_fraction must be in (0, 1]".into()));
        }
        let mut order = models;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let take = ((train_fraction * order.len() as f64).ceil() as usize).min(order.len());
        let train: BTreeSet<String> = order[..take].iter().cloned().collect();
        let test: BTreeSet<String> = order[take..].iter().cloned().collect();
        Ok(GroupSplit {
            train_models: train,
            test_models: test,
        })
    }

    /// The same samples with the anchor block removed (q = 0); detection
    /// ignores anchors.
    pub fn without_anchors(&self) -> Dataset {
        let mut out = self.clone();
        out.a = DMatrix::zeros(self.n(), 0);
        if out.preprocessing.a_means.is_some() {
            out.preprocessing.a_means = Some(DVector::zeros(0));
        }
        out
    }

    /// Digest of the raw sample content (matrices plus run metadata).
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for meta in &self.runs {
            h.update(meta.model_id.as_bytes());
            h.update([0]);
            h.update(meta.run_id.as_bytes());
            h.update([match meta.kind {
                RunKind::Forced => 1u8,
                RunKind::Control => 2u8,
            }]);
            h.update(meta.n_steps.to_le_bytes());
        }
        for v in self.x.iter().chain(self.y.iter()).chain(self.a.iter()) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Partition of model ids into a training and a held-out side. All runs of a
/// model land on the same side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub train_models: BTreeSet<String>,
    pub test_models: BTreeSet<String>,
}

impl GroupSplit {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.train_models {
            h.update(m.as_bytes());
            h.update([1]);
        }
        for m in &self.test_models {
            h.update(m.as_bytes());
            h.update([2]);
        }
        hex(&h.finalize())
    }
}

// ---------------------------------------------------------------------------
// Manifest ingestion
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    runs: Vec<ManifestRun>,
    p: usize,
    q: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestRun {
    model_id: String,
    run_id: String,
    kind: RunKind,
    x_file: String,
    y_file: String,
    a_file: String,
}

/// Count the distinct model ids a manifest references without reading any
/// matrix files.
pub fn load_manifest_models(manifest_path: &Path) -> Result<usize> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Io {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let models: BTreeSet<&String> = manifest.runs.iter().map(|r| &r.model_id).collect();
    Ok(models.len())
}

/// Load a dataset from a JSON manifest referencing per-run delimited-text
/// matrix files. File paths are resolved relative to the manifest location.
/// No preprocessing is applied.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::Io {
        path: manifest_path.to_path_buf(),
        source: e,
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut blocks = Vec::new();
    for run in &manifest.runs {
        let x = read_matrix(&base.join(&run.x_file), Some(manifest.p))?;
        let yq = read_matrix(&base.join(&run.y_file), Some(1))?;
        let a = if manifest.q == 0 {
            DMatrix::zeros(x.nrows(), 0)
        } else {
            read_matrix(&base.join(&run.a_file), Some(manifest.q))?
        };
        let steps = x.nrows();
        if yq.nrows() != steps || a.nrows() != steps {
            return Err(Error::Run {
                model_id: run.model_id.clone(),
                run_id: run.run_id.clone(),
                message: format!(
                    "x has {} steps but y has {} and a has {}",
                    steps,
                    yq.nrows(),
                    a.nrows()
                ),
            });
        }
        let meta = RunMeta {
            model_id: run.model_id.clone(),
            run_id: run.run_id.clone(),
            kind: run.kind,
            n_steps: steps,
        };
        blocks.push((meta, x, yq.column(0).into_owned(), a));
    }
    Dataset::from_runs(blocks)
}

/// Write `dataset` under `dir` in the manifest format and return the
/// manifest path. Numbers are written in shortest round-trip form, so a
/// save/load cycle reproduces the matrices bit-exactly.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut runs = Vec::new();
    for (i, meta) in dataset.runs().iter().enumerate() {
        let range = dataset.run_range(i);
        let stem = format!("{}_{}", sanitize(&meta.model_id), sanitize(&meta.run_id));
        let x_file = format!("{stem}_x.txt");
        let y_file = format!("{stem}_y.txt");
        let a_file = format!("{stem}_a.txt");
        write_matrix(&dir.join(&x_file), &dataset.x.rows(range.start, meta.n_steps).into_owned())?;
        write_matrix(
            &dir.join(&y_file),
            &DMatrix::from_column_slice(meta.n_steps, 1, dataset.y.rows(range.start, meta.n_steps).as_slice()),
        )?;
        if dataset.q() > 0 {
            write_matrix(&dir.join(&a_file), &dataset.a.rows(range.start, meta.n_steps).into_owned())?;
        }
        runs.push(ManifestRun {
            model_id: meta.model_id.clone(),
            run_id: meta.run_id.clone(),
            kind: meta.kind,
            x_file,
            y_file,
            a_file,
        });
    }
    let manifest = Manifest {
        runs,
        p: dataset.p(),
        q: dataset.q(),
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// Read a whitespace- or comma-delimited numeric matrix. Rejects NaN and
/// infinite entries with their location.
pub fn read_matrix(path: &Path, expect_cols: Option<usize>) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut values: Vec<f64> = Vec::new();
    let mut ncols = None;
    let mut nrows = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.is_empty() {
            continue;
        }
        match ncols {
            None => ncols = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected {} columns, found {}", c, fields.len()),
                })
            }
            _ => {}
        }
        for (col, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("cannot parse '{f}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    name: path.display().to_string(),
                    row: nrows,
                    col,
                });
            }
            values.push(v);
        }
        nrows += 1;
    }
    let ncols = ncols.unwrap_or(0);
    if let Some(want) = expect_cols {
        if ncols != want {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected {want} columns, found {ncols}"),
            });
        }
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &values))
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{}", m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
