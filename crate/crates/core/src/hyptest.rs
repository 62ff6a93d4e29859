//! Hypothesis-testing machinery: per-run rank-correlation statistics,
//! pooled null-distribution moments, Gaussian-quantile thresholds,
//! leave-one-model-out evaluation, and subagged type I error and power.

use std::collections::{BTreeMap, BTreeSet};


use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::anchor::Fingerprint;
use crate::dataset::{Dataset, RunKind};
use crate::diagnostics::{self, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::selection::{preprocess_train, preprocess_with, subag, SubagConfig, SubagEnsemble};

/// Spearman rank correlation between the forcing series and the predicted
/// series of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestStatistic {
    pub value: f64,
}

/// Rank-correlate the forcing-of-interest series against the fingerprint's
/// prediction on a run's (already preprocessed) rows.
pub fn run_statistic(f: &Fingerprint, run_rows: &nalgebra::DMatrix<f64>, forcing_series: &[f64]) -> Result<TestStatistic> {
    if run_rows.nrows() != forcing_series.len() {
        return Err(Error::Dimension(format!(
            "run has {} steps but the forcing series has {}",
            run_rows.nrows(),
            forcing_series.len()
        )));
    }
    if forcing_series.len() < 3 {
        return Err(Error::InvalidArgument("statistic needs at least 3 steps".into()));
    }
    let pred = f.predict_rows(run_rows)?;
    let value = diagnostics::spearman(forcing_series, pred.as_slice()).map_err(|e| match e {
        Error::UndefinedStatistic(_) => {
            Error::UndefinedStatistic("predicted series is constant; run flagged".into())
        }
        other => other,
    })?;
    Ok(TestStatistic { value })
}

/// Pooled null-distribution moments: the across-model mean of per-model
/// means, and the variance combining within-model variance with the spread
/// of the per-model means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NullEstimate {
    pub mu0: f64,
    pub sigma0: f64,
    pub per_model: Vec<ModelNullMoments>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelNullMoments {
    pub model_id: String,
    pub mu: f64,
    pub sigma: f64,
    pub runs: usize,
}

/// Estimate the null moments from per-model lists of null-run statistics.
/// Per-model variances use the 1/R normalization (zero for a single run);
/// the pooled variance is the mean of per-model variances plus the mean
/// squared deviation of per-model means from the pooled mean.
pub fn estimate_null(stats: &BTreeMap<String, Vec<f64>>) -> Result<NullEstimate> {
    let models: Vec<(&String, &Vec<f64>)> = stats.iter().filter(|(_, v)| !v.is_empty()).collect();
    if models.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "null estimation needs at least 2 models with runs, found {}",
            models.len()
        )));
    }
    let mut per_model = Vec::with_capacity(models.len());
    for (m, vals) in &models {
        let r = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / r;
        let var = vals.iter().map(|t| (t - mu) * (t - mu)).sum::<f64>() / r;
        per_model.push(ModelNullMoments {
            model_id: (*m).clone(),
            mu,
            sigma: var.sqrt(),
            runs: vals.len(),
        });
    }
    let k = per_model.len() as f64;
    let mu0 = per_model.iter().map(|m| m.mu).sum::<f64>() / k;
    let within = per_model.iter().map(|m| m.sigma * m.sigma).sum::<f64>() / k;
    let between = per_model.iter().map(|m| (m.mu - mu0) * (m.mu - mu0)).sum::<f64>() / k;
    Ok(NullEstimate {
        mu0,
        sigma0: (within + between).sqrt(),
        per_model,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tails {
    #[default]
    TwoTailed,
    Upper,
}

/// Rejection thresholds `mu0 +- z sigma0`. Rejection is strict: a statistic
/// exactly at a threshold is retained.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Threshold {
    pub low: f64,
    pub high: f64,
    /// Set when sigma0 = 0 collapsed both thresholds onto mu0.
    pub degenerate: bool,
}

impl Threshold {
    pub fn rejects(&self, t: f64) -> bool {
        t > self.high || t < self.low
    }
}

pub fn threshold(null: &NullEstimate, alpha_star: f64, tails: Tails) -> Result<Threshold> {
    if !(alpha_star > 0.0 && alpha_star < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha_star must be in (0, 1), got {alpha_star}"
        )));
    }
    if null.sigma0 == 0.0 {
        return Ok(Threshold {
            low: null.mu0,
            high: null.mu0,
            degenerate: true,
        });
    }
    let normal = statrs::distribution::Normal::new(0.0, 1.0).expect("unit normal");
    match tails {
        Tails::TwoTailed => {
            let z = normal.inverse_cdf(1.0 - alpha_star / 2.0);
            Ok(Threshold {
                low: null.mu0 - z * null.sigma0,
                high: null.mu0 + z * null.sigma0,
                degenerate: false,
            })
        }
        Tails::Upper => {
            let z = normal.inverse_cdf(1.0 - alpha_star);
            Ok(Threshold {
                low: f64::NEG_INFINITY,
                high: null.mu0 + z * null.sigma0,
                degenerate: false,
            })
        }
    }
}

/// The statistics one subag member produced on its held-out models.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MemberStatistics {
    pub held_out: BTreeSet<String>,
    /// Control-run statistics per held-out model.
    pub null_stats: BTreeMap<String, Vec<f64>>,
    /// Forced-run statistics per held-out model.
    pub forced_stats: BTreeMap<String, Vec<f64>>,
    /// Runs whose predicted series was constant and which were skipped.
    pub flagged: Vec<(String, String)>,
}

/// Per-model type I error and power, averaged over the members that held
/// the model out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model_id: String,
    pub alpha: Option<f64>,
    pub power: Option<f64>,
    pub control_runs: usize,
    pub forced_runs: usize,
    /// Members in which this model was held out and evaluable.
    pub members: usize,
}

/// Leave-one-model-out evaluation of one model across the subag members.
/// For each member holding the model out, the threshold is built from the
/// other held-out models' control statistics; rejections of the model's own
/// runs are averaged per member and then across members.
pub fn evaluate_model(
    model: &str,
    members: &[MemberStatistics],
    alpha_star: f64,
    tails: Tails,
) -> Result<ModelEvaluation> {
    let mut alpha_parts = Vec::new();
    let mut power_parts = Vec::new();
    let mut control_runs = 0usize;
    let mut forced_runs = 0usize;
    let mut used = 0usize;
    let mut ever_held_out = false;
    for member in members {
        if !member.held_out.contains(model) {
            continue;
        }
        ever_held_out = true;
        let others: BTreeMap<String, Vec<f64>> = member
            .null_stats
            .iter()
            .filter(|(m, v)| m.as_str() != model && !v.is_empty())
            .map(|(m, v)| (m.clone(), v.clone()))
            .collect();
        if others.len() < 2 {
            continue;
        }
        let null = estimate_null(&others)?;
        let th = threshold(&null, alpha_star, tails)?;
        let mut contributed = false;
        if let Some(own_null) = member.null_stats.get(model) {
            if !own_null.is_empty() {
                let frac = own_null.iter().filter(|t| th.rejects(**t)).count() as f64 / own_null.len() as f64;
                alpha_parts.push(frac);
                control_runs = control_runs.max(own_null.len());
                contributed = true;
            }
        }
        if let Some(own_forced) = member.forced_stats.get(model) {
            if !own_forced.is_empty() {
                let frac = own_forced.iter().filter(|t| th.rejects(**t)).count() as f64 / own_forced.len() as f64;
                power_parts.push(frac);
                forced_runs = forced_runs.max(own_forced.len());
                contributed = true;
            }
        }
        if contributed {
            used += 1;
        }
    }
    if !ever_held_out {
        return Err(Error::UndefinedStatistic(format!(
            "model '{model}' was never held out; its error rates are undefined"
        )));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(ModelEvaluation {
        model_id: model.to_string(),
        alpha: mean(&alpha_parts),
        power: mean(&power_parts),
        control_runs,
        forced_runs,
        members: used,
    })
}

/// Aggregated report: per-model error rates plus their unweighted averages.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestReport {
    pub alpha_star: f64,
    pub tails: Tails,
    pub subag_members: usize,
    pub per_model: Vec<ModelEvaluation>,
    pub alpha_bar: Option<f64>,
    pub kappa_bar: Option<f64>,
    pub flagged_runs: usize,
    /// Models that were never held out across all members.
    pub missing_models: Vec<String>,
}

/// Everything the full pipeline produces besides artifacts on disk.
#[derive(Clone, Debug)]
pub struct TestOutcome {
    pub report: TestReport,
    pub ensemble: SubagEnsemble,
    pub member_stats: Vec<MemberStatistics>,
    pub member_diagnostics: Vec<DiagnosticsReport>,
    /// Member average of the diagnostics.
    pub diagnostics: Option<DiagnosticsReport>,
    /// Test-half predictions of member 0, for plotting.
    pub scatter: Option<ScatterData>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScatterData {
    pub y: Vec<f64>,
    pub yhat: Vec<f64>,
    /// Anchor values per row (q columns).
    pub anchors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestConfig {
    pub subag: SubagConfig,
    pub alpha_star: f64,
    pub tails: Tails,
    /// Forcing-of-interest series for the statistic. When absent it is taken
    /// from the forced runs, which must all share the same target series.
    pub forcing_series: Option<Vec<f64>>,
    pub mi_bins: usize,
}

/// The shared target series of the forced runs, used to pair control-run
/// steps with forcing values in order.
pub fn target_forcing_series(d: &Dataset) -> Result<Vec<f64>> {
    let mut series: Option<Vec<f64>> = None;
    for (i, meta) in d.runs().iter().enumerate() {
        if meta.kind != RunKind::Forced {
            continue;
        }
        let range = d.run_range(i);
        let this: Vec<f64> = d.y().rows(range.start, meta.n_steps).iter().copied().collect();
        match &series {
            None => series = Some(this),
            Some(prev) => {
                let diff = prev
                    .iter()
                    .zip(&this)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if diff > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "forced runs disagree on the target series (max difference {diff:.3e}); \
                         pass the forcing series explicitly"
                    )));
                }
            }
        }
    }
    series.ok_or_else(|| Error::InvalidArgument("dataset has no forced runs".into()))
}

/// Run the whole detection/attribution pipeline: subagging with per-member
/// hyperparameter selection, per-run statistics on each member's held-out
/// half, leave-one-model-out thresholds, and subagged per-model error rates.
pub fn full_test(d_raw: &Dataset, cfg: &TestConfig) -> Result<TestOutcome> {
    if !(cfg.alpha_star > 0.0 && cfg.alpha_star < 1.0) {
        return Err(Error::InvalidArgument("alpha_star must be in (0, 1)".into()));
    }
    let has_forced = d_raw.runs().iter().any(|r| r.kind == RunKind::Forced);
    let has_control = d_raw.runs().iter().any(|r| r.kind == RunKind::Control);
    if !has_forced || !has_control {
        return Err(Error::InvalidArgument(
            "hypothesis testing needs both forced and control runs".into(),
        ));
    }
    let forcing = match &cfg.forcing_series {
        Some(s) => s.clone(),
        None => target_forcing_series(d_raw)?,
    };
    let ensemble = subag(d_raw, &cfg.subag)?;

    let mut member_stats = Vec::with_capacity(ensemble.members.len());
    let mut member_diagnostics = Vec::with_capacity(ensemble.members.len());
    let mut scatter = None;
    for (mi, member) in ensemble.members.iter().enumerate() {
        // Re-derive the member's held-out half with its stored training
        // statistics, then score every run.
        let train = preprocess_train(d_raw, &member.split.train_models, cfg.subag.window)?;
        let dte = preprocess_with(d_raw, &member.split.test_models, &train, cfg.subag.window)?;
        let mut stats = MemberStatistics {
            held_out: member.split.test_models.clone(),
            ..Default::default()
        };
        let yhat = member.fingerprint.predict(&dte)?;
        for (ri, meta) in dte.runs().iter().enumerate() {
            let range = dte.run_range(ri);
            let pred: Vec<f64> = yhat.rows(range.start, meta.n_steps).iter().copied().collect();
            let t = match diagnostics::spearman(&forcing, &pred) {
                Ok(v) => v,
                Err(Error::UndefinedStatistic(_)) => {
                    stats.flagged.push((meta.model_id.clone(), meta.run_id.clone()));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let bucket = match meta.kind {
                RunKind::Control => &mut stats.null_stats,
                RunKind::Forced => &mut stats.forced_stats,
            };
            bucket.entry(meta.model_id.clone()).or_default().push(t);
        }
        member_stats.push(stats);
        member_diagnostics.push(diagnostics::evaluate(&dte, &member.fingerprint, cfg.mi_bins)?);
        if mi == 0 {
            let anchors = (0..dte.n())
                .map(|i| (0..dte.q()).map(|j| dte.a()[(i, j)]).collect())
                .collect();
            scatter = Some(ScatterData {
                y: dte.y().iter().copied().collect(),
                yhat: yhat.iter().copied().collect(),
                anchors,
            });
        }
    }

    let mut per_model = Vec::new();
    let mut missing = Vec::new();
    for model in d_raw.model_ids() {
        match evaluate_model(&model, &member_stats, cfg.alpha_star, cfg.tails) {
            Ok(eval) => per_model.push(eval),
            Err(Error::UndefinedStatistic(_)) => missing.push(model),
            Err(e) => return Err(e),
        }
    }
    let mean_of = |f: &dyn Fn(&ModelEvaluation) -> Option<f64>| {
        let vals: Vec<f64> = per_model.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let report = TestReport {
        alpha_star: cfg.alpha_star,
        tails: cfg.tails,
        subag_members: ensemble.members.len(),
        alpha_bar: mean_of(&|m| m.alpha),
        kappa_bar: mean_of(&|m| m.power),
        flagged_runs: member_stats.iter().map(|m| m.flagged.len()).sum(),
        per_model,
        missing_models: missing,
    };
    let diagnostics = DiagnosticsReport::average(&member_diagnostics);
    Ok(TestOutcome {
        report,
        ensemble,
        member_stats,
        member_diagnostics,
        diagnostics,
        scatter,
    })
}
