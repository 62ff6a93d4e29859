//! Grouped cross-validation over a (gamma, lambda) grid, multiobjective
//! hyperparameter selection via the weighted L2 criterion, and subagging.
//!
//! Validation scores per grid point are the fold averages of RMSE and of its
//! anchor-span component; the per-fold Gram matrices are cached so the whole
//! grid costs one factorization per (gamma, lambda, fold) but a single
//! X-product per fold.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{build_projection, solve_penalized, AnchorBasis, Fingerprint, HyperParams};
use crate::dataset::{Dataset, GroupSplit};
use crate::error::{Error, Result};

/// Hyperparameter grid. Defaults to the nine-value gamma ladder and fifty
/// log-spaced lambda values in [1, 1e9].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Grid {
    pub fn new(gammas: Vec<f64>, lambdas: Vec<f64>) -> Result<Self> {
        if gammas.is_empty() || lambdas.is_empty() {
            return Err(Error::InvalidArgument("grid axes must be nonempty".into()));
        }
        if !gammas.windows(2).all(|w| w[0] < w[1]) || !lambdas.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument("grid axes must be strictly increasing".into()));
        }
        if gammas[0] < 0.0 {
            return Err(Error::InvalidArgument("gamma values must be >= 0".into()));
        }
        if lambdas[0] <= 0.0 {
            return Err(Error::InvalidArgument("lambda values must be > 0".into()));
        }
        Ok(Grid { gammas, lambdas })
    }

    pub fn log_lambdas(min: f64, max: f64, count: usize) -> Vec<f64> {
        let (lo, hi) = (min.ln(), max.ln());
        (0..count)
            .map(|k| (lo + (hi - lo) * k as f64 / (count.max(2) - 1) as f64).exp())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.gammas.len() * self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            gammas: vec![1.0, 2.0, 5.0, 10.0, 1e2, 1e3, 1e4, 1e5, 1e6],
            lambdas: Grid::log_lambdas(1.0, 1e9, 50),
        }
    }
}

/// Partition the models into K near-equal folds (by model, never by run).
pub fn kfold_groups(models: &BTreeSet<String>, k: usize, seed: u64) -> Result<Vec<BTreeSet<String>>> {
    if k < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if models.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k} folds requested for {} models",
            models.len()
        )));
    }
    let mut order: Vec<String> = models.iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = models.len() / k;
    let extra = models.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(order[at..at + size].iter().cloned().collect());
        at += size;
    }
    Ok(folds)
}

/// Validation objectives for one grid point: fold-averaged RMSE and, when
/// anchors are present, its anchor-span component.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveEntry {
    pub gamma: f64,
    pub lambda: f64,
    pub rmse: f64,
    pub rmse_anchor_span: Option<f64>,
}

impl ObjectiveEntry {
    fn objectives(&self) -> Vec<f64> {
        match self.rmse_anchor_span {
            Some(r) => vec![self.rmse, r],
            None => vec![self.rmse],
        }
    }
}

/// The full validation table with the normalization points of the weighted
/// L2 criterion: the ideal point (componentwise minimum) and the nadir point
/// (componentwise maximum over the Pareto front).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveTable {
    pub entries: Vec<ObjectiveEntry>,
    pub weights: [f64; 2],
    pub ideal: Vec<f64>,
    pub nadir: Vec<f64>,
}

impl ObjectiveTable {
    pub fn new(entries: Vec<ObjectiveEntry>, weights: [f64; 2]) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("objective table is empty".into()));
        }
        if weights.iter().any(|w| *w < 0.0) || (weights[0] + weights[1] - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "weights must be non-negative and sum to 1".into(),
            ));
        }
        let dims = entries[0].objectives().len();
        if entries.iter().any(|e| e.objectives().len() != dims) {
            return Err(Error::InvalidArgument(
                "entries mix anchored and unanchored objectives".into(),
            ));
        }
        let mut table = ObjectiveTable {
            entries,
            weights,
            ideal: vec![0.0; dims],
            nadir: vec![0.0; dims],
        };
        for j in 0..dims {
            table.ideal[j] = table
                .entries
                .iter()
                .map(|e| e.objectives()[j])
                .fold(f64::INFINITY, f64::min);
        }
        let front = table.pareto_front();
        for j in 0..dims {
            table.nadir[j] = front
                .iter()
                .map(|&i| table.entries[i].objectives()[j])
                .fold(f64::NEG_INFINITY, f64::max);
        }
        Ok(table)
    }

    /// Indices of grid points not weakly dominated (componentwise <= with one
    /// strict <) by any other point.
    pub fn pareto_front(&self) -> Vec<usize> {
        let objs: Vec<Vec<f64>> = self.entries.iter().map(|e| e.objectives()).collect();
        (0..objs.len())
            .filter(|&i| !objs.iter().enumerate().any(|(j, o)| j != i && dominates(o, &objs[i])))
            .collect()
    }

    pub fn is_pareto_efficient(&self, index: usize) -> bool {
        let objs: Vec<Vec<f64>> = self.entries.iter().map(|e| e.objectives()).collect();
        !objs
            .iter()
            .enumerate()
            .any(|(j, o)| j != index && dominates(o, &objs[index]))
    }
}

fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// The chosen grid point with its normalized score.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub score: f64,
    /// Objectives that collapsed (nadir equal to ideal) and were dropped
    /// from the score with weight renormalization.
    pub dropped_objectives: Vec<usize>,
}

/// Argmin of sqrt(sum_j w_j ((phi_j - ideal_j) / (nadir_j - ideal_j))^2)
/// over the grid; exact score ties go to larger gamma, then larger lambda.
///
/// A singleton Pareto front is a unanimous optimum and is returned directly.
/// On multi-point fronts, an objective whose nadir equals its ideal carries
/// no information; it is dropped and the weights renormalized.
pub fn select_weighted_l2(table: &ObjectiveTable) -> Result<Selection> {
    let dims = table.ideal.len();
    let front = table.pareto_front();
    if front.len() == 1 {
        let index = front[0];
        return Ok(Selection {
            index,
            gamma: table.entries[index].gamma,
            lambda: table.entries[index].lambda,
            score: 0.0,
            dropped_objectives: Vec::new(),
        });
    }
    let mut weights: Vec<f64> = (0..dims).map(|j| table.weights[j]).collect();
    let mut dropped = Vec::new();
    for j in 0..dims {
        if table.nadir[j] - table.ideal[j] <= 0.0 {
            weights[j] = 0.0;
            dropped.push(j);
        }
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
    let score_of = |e: &ObjectiveEntry| -> f64 {
        let objs = e.objectives();
        let mut s = 0.0;
        for j in 0..dims {
            if weights[j] == 0.0 {
                continue;
            }
            let denom = table.nadir[j] - table.ideal[j];
            let z = (objs[j] - table.ideal[j]) / denom;
            s += weights[j] * z * z;
        }
        s.sqrt()
    };
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in table.entries.iter().enumerate() {
        let s = score_of(e);
        let better = match best {
            None => true,
            Some((bi, bs)) => {
                let b = &table.entries[bi];
                s < bs
                    || (s == bs
                        && (e.gamma > b.gamma || (e.gamma == b.gamma && e.lambda > b.lambda)))
            }
        };
        if better {
            best = Some((i, s));
        }
    }
    let (index, score) = best.expect("nonempty table");
    Ok(Selection {
        index,
        gamma: table.entries[index].gamma,
        lambda: table.entries[index].lambda,
        score,
        dropped_objectives: dropped,
    })
}

/// Output of one cross-validation sweep: the objective table plus the
/// fold-averaged coefficient vector per grid point (index-aligned).
#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub table: ObjectiveTable,
    pub fold_average_betas: Vec<DVector<f64>>,
}

/// Sweep the grid with grouped K-fold cross-validation. For each grid point
/// the validation objectives are averaged over the K held-out folds and the
/// K per-fold fits are averaged into one coefficient vector.
pub fn cv_objectives(
    d: &Dataset,
    folds: &[BTreeSet<String>],
    grid: &Grid,
    basis: &AnchorBasis,
    weights: [f64; 2],
) -> Result<CvOutcome> {
    if !d.is_regression_ready() {
        return Err(Error::Preprocessing(
            "cross validation requires a preprocessed dataset".into(),
        ));
    }
    if folds.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    let n_points = grid.len();
    let p = d.p();
    let mut sum_rmse = vec![0.0; n_points];
    let mut sum_rmse_pi = vec![0.0; n_points];
    let mut beta_sums = vec![DVector::zeros(p); n_points];
    let anchored = d.q() > 0;

    for fold in folds {
        let val = d.subset_by_models(fold)?;
        if val.n() == 0 {
            return Err(Error::InvalidArgument("fold with zero validation rows".into()));
        }
        let train_models: BTreeSet<String> = d
            .model_ids()
            .into_iter()
            .filter(|m| !fold.contains(m))
            .collect();
        let train = d.subset_by_models(&train_models)?;
        if train.n() == 0 {
            return Err(Error::InvalidArgument("fold with zero training rows".into()));
        }

        // Cached pieces: X'X, the span coordinates W = Q'X, and the right
        // hand sides. Per grid point only a p x p update and solve remain.
        let proj = build_projection(train.a(), basis)?;
        let gram0 = train.x().tr_mul(train.x());
        let xy = train.x().tr_mul(train.y()).column(0).into_owned();
        let w = proj.span_coords(train.x())?;
        let wtw = w.tr_mul(&w);
        let wy = proj.span_coords_vec(train.y())?;
        let wt_wy = w.tr_mul(&wy).column(0).into_owned();

        let val_proj = build_projection(val.a(), basis)?;
        let n_val = val.n() as f64;

        for (gi, &gamma) in grid.gammas.iter().enumerate() {
            let g = &gram0 + wtw.scale(gamma - 1.0);
            let rhs = &xy + wt_wy.scale(gamma - 1.0);
            for (li, &lambda) in grid.lambdas.iter().enumerate() {
                let idx = gi * grid.lambdas.len() + li;
                let beta = solve_penalized(&g, &rhs, lambda)?;
                let resid = val.y() - val.x() * &beta;
                sum_rmse[idx] += (resid.norm_squared() / n_val).sqrt();
                if anchored {
                    let coords = val_proj.span_coords_vec(&resid)?;
                    sum_rmse_pi[idx] += (coords.norm_squared() / n_val).sqrt();
                }
                beta_sums[idx] += beta;
            }
        }
    }

    let k = folds.len() as f64;
    let mut entries = Vec::with_capacity(n_points);
    for (gi, &gamma) in grid.gammas.iter().enumerate() {
        for (li, &lambda) in grid.lambdas.iter().enumerate() {
            let idx = gi * grid.lambdas.len() + li;
            entries.push(ObjectiveEntry {
                gamma,
                lambda,
                rmse: sum_rmse[idx] / k,
                rmse_anchor_span: anchored.then(|| sum_rmse_pi[idx] / k),
            });
        }
    }
    let table = ObjectiveTable::new(entries, weights)?;
    let fold_average_betas = beta_sums.into_iter().map(|b| b.unscale(k)).collect();
    Ok(CvOutcome { table, fold_average_betas })
}

/// How the member fingerprint is produced after hyperparameter selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitMode {
    /// Average of the K per-fold fits at the selected grid point.
    #[default]
    FoldAverage,
    /// Refit once on all training rows at the selected grid point.
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubagConfig {
    pub members: usize,
    pub folds: usize,
    pub train_fraction: f64,
    pub window: usize,
    pub grid: Grid,
    pub basis: AnchorBasis,
    pub weights: [f64; 2],
    pub refit: RefitMode,
    pub seed: u64,
}

impl SubagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(Error::InvalidArgument("need at least one subag member".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidArgument("need at least 2 folds".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One train/test split with its selected fingerprint and the table behind
/// the choice.
#[derive(Clone, Debug)]
pub struct SubagMember {
    pub fingerprint: Fingerprint,
    pub split: GroupSplit,
    pub selected: Selection,
    pub table: ObjectiveTable,
}

/// B independent half-splits with their fingerprints and the coefficient
/// average.
#[derive(Clone, Debug)]
pub struct SubagEnsemble {
    pub members: Vec<SubagMember>,
    pub aggregate_beta: DVector<f64>,
}

/// Preprocess the training half of a split: per-run window centering, then
/// column standardization, then target centering, all statistics from these
/// rows.
pub fn preprocess_train(d_raw: &Dataset, models: &BTreeSet<String>, window: usize) -> Result<Dataset> {
    d_raw
        .subset_by_models(models)?
        .center_runs(window)?
        .standardize()?
        .center_targets()
}

/// Preprocess held-out rows with the statistics recorded on the training
/// half.
pub fn preprocess_with(d_raw: &Dataset, models: &BTreeSet<String>, train: &Dataset, window: usize) -> Result<Dataset> {
    d_raw
        .subset_by_models(models)?
        .center_runs(window)?
        .standardize_with(train.preprocessing())?
        .center_targets_with(train.preprocessing())
}

fn run_member(d_raw: &Dataset, cfg: &SubagConfig, split_seed: u64, fold_seed: u64) -> Result<SubagMember> {
    let split = d_raw.split_models(split_seed, cfg.train_fraction)?;
    let train = preprocess_train(d_raw, &split.train_models, cfg.window)?;
    let folds = kfold_groups(&split.train_models, cfg.folds, fold_seed)?;
    let cv = cv_objectives(&train, &folds, &cfg.grid, &cfg.basis, cfg.weights)?;
    let selected = select_weighted_l2(&cv.table)?;
    if cfg.weights.iter().all(|w| *w > 0.0)
        && selected.dropped_objectives.is_empty()
        && !cv.table.is_pareto_efficient(selected.index)
    {
        return Err(Error::InvalidArgument(
            "selected grid point is not Pareto efficient".into(),
        ));
    }
    let hyper = HyperParams::new(selected.gamma, selected.lambda)?;
    let beta = match cfg.refit {
        RefitMode::FoldAverage => cv.fold_average_betas[selected.index].clone(),
        RefitMode::Full => {
            let proj = build_projection(train.a(), &cfg.basis)?;
            crate::anchor::fit(&train, &proj, hyper)?.beta
        }
    };
    let fingerprint = Fingerprint {
        beta,
        hyper,
        basis: cfg.basis.clone(),
        split: Some(split.clone()),
        preprocessing: train.preprocessing().clone(),
    };
    Ok(SubagMember {
        fingerprint,
        split,
        selected,
        table: cv.table,
    })
}

/// Derive the per-member (split, fold) seeds from the master seed.
pub fn member_seeds(seed: u64, members: usize) -> Vec<(u64, u64)> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..members).map(|_| (master.next_u64(), master.next_u64())).collect()
}

/// Run the full subagging loop: B random half-splits, per-split CV and
/// weighted-L2 selection, aggregated by averaging coefficients. Members are
/// independent and run in parallel; results are reduced in member order, so
/// the outcome does not depend on the worker count.
pub fn subag(d_raw: &Dataset, cfg: &SubagConfig) -> Result<SubagEnsemble> {
    cfg.validate()?;
    let seeds = member_seeds(cfg.seed, cfg.members);
    subag_with_member_seeds(d_raw, cfg, &seeds)
}

/// Subagging with explicit per-member seeds; `subag` is the common entry.
pub fn subag_with_member_seeds(d_raw: &Dataset, cfg: &SubagConfig, seeds: &[(u64, u64)]) -> Result<SubagEnsemble> {
    let members: Vec<SubagMember> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, (split_seed, fold_seed))| {
            run_member(d_raw, cfg, *split_seed, *fold_seed)
                .map_err(|e| Error::InvalidArgument(format!("subag member {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = members[0].fingerprint.beta.len();
    let mut aggregate = DVector::zeros(p);
    for m in &members {
        aggregate += &m.fingerprint.beta;
    }
    aggregate.unscale_mut(members.len() as f64);
    Ok(SubagEnsemble {
        members,
        aggregate_beta: aggregate,
    })
}
