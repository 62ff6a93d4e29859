//! Scalar quality and dependence measures: prediction error, its
//! anchor-span component, rank correlation, the basis-limited correlation
//! ratio, a histogram mutual-information estimate, and the residual variance
//! decomposition.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::anchor::{build_projection, AnchorProjection, Fingerprint};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Default bin count per axis for the mutual-information histogram.
pub const DEFAULT_MI_BINS: usize = 16;

pub fn rmse(y: &DVector<f64>, yhat: &DVector<f64>) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::Dimension(format!(
            "rmse over vectors of lengths {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty vectors".into()));
    }
    let ss: f64 = y.iter().zip(yhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// Root mean square of the residual component inside the anchor span.
pub fn rmse_anchor_span(residuals: &DVector<f64>, proj: &AnchorProjection) -> Result<f64> {
    if residuals.len() != proj.n() {
        return Err(Error::Dimension(format!(
            "residual length {} does not match projection rows {}",
            residuals.len(),
            proj.n()
        )));
    }
    // || P r || equals the norm of the span coordinates.
    let coords = proj.span_coords_vec(residuals)?;
    Ok((coords.norm_squared() / residuals.len() as f64).sqrt())
}

/// Average ranks (1-based); ties receive the mean of the ranks they occupy.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "pearson over vectors of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedStatistic(
            "correlation of a constant series is undefined".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::Dimension(format!(
            "spearman over vectors of lengths {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.len() < 3 {
        return Err(Error::InvalidArgument("spearman needs at least 3 points".into()));
    }
    let ry = average_ranks(y);
    let rh = average_ranks(yhat);
    pearson(&ry, &rh)
}

/// Basis-limited correlation ratio: sqrt(Var(P r) / Var(r)), where `P r`
/// stands in for the conditional expectation of the residuals given the
/// anchors. A lower bound of the population ratio; exact when the
/// conditional expectation lies in the expanded anchor span.
pub fn correlation_ratio(residuals: &DVector<f64>, proj: &AnchorProjection) -> Result<f64> {
    let (explained, unexplained) = variance_decomposition(residuals, proj)?;
    Ok((explained / (explained + unexplained)).sqrt())
}

/// Split Var(r) into the part explained by the anchors, Var(P r), and the
/// orthogonal remainder. Exact because projected vectors have zero mean
/// (anchor columns are centered), so the cross term vanishes.
pub fn variance_decomposition(residuals: &DVector<f64>, proj: &AnchorProjection) -> Result<(f64, f64)> {
    let n = residuals.len();
    if n != proj.n() {
        return Err(Error::Dimension(format!(
            "residual length {} does not match projection rows {}",
            n, proj.n()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("variance needs at least 2 points".into()));
    }
    let mean = residuals.mean();
    let var: f64 = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(Error::UndefinedStatistic("residuals have zero variance".into()));
    }
    let explained = proj.span_coords_vec(residuals)?.norm_squared() / (n as f64 - 1.0);
    let unexplained = var - explained;
    Ok((explained, unexplained.max(0.0)))
}

/// Plug-in mutual information (nats) over an equal-frequency 2-D histogram
/// with `bins` bins per axis. Biased upward by roughly (bins-1)^2 / (2n);
/// values are comparable only at matched n and bins.
pub fn mutual_info(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "mutual_info over vectors of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument("mutual_info needs at least 2 bins".into()));
    }
    let n = x.len();
    if n < 10 * bins {
        return Err(Error::InvalidArgument(format!(
            "mutual_info with {bins} bins needs at least {} samples, got {n}",
            10 * bins
        )));
    }
    let bx = equal_frequency_bins(x, bins);
    let by = equal_frequency_bins(y, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut mx = vec![0usize; bins];
    let mut my = vec![0usize; bins];
    for i in 0..n {
        joint[bx[i] * bins + by[i]] += 1;
        mx[bx[i]] += 1;
        my[by[i]] += 1;
    }
    let nf = n as f64;
    let mut info = 0.0;
    for j in 0..bins {
        for k in 0..bins {
            let c = joint[j * bins + k];
            if c == 0 {
                continue;
            }
            let pjk = c as f64 / nf;
            let pj = mx[j] as f64 / nf;
            let pk = my[k] as f64 / nf;
            info += pjk * (pjk / (pj * pk)).ln();
        }
    }
    Ok(info.max(0.0))
}

/// Assign each sample to one of `bins` near-equal-count bins by rank.
fn equal_frequency_bins(v: &[f64], bins: usize) -> Vec<usize> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
    let mut out = vec![0usize; n];
    for (pos, &i) in idx.iter().enumerate() {
        out[i] = (pos * bins) / n;
    }
    out
}

/// Bundle of evaluation metrics for one fingerprint on one dataset.
/// Anchor-dependent entries are absent when the dataset has no anchors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub rmse: f64,
    pub rmse_anchor_span: Option<f64>,
    pub r2: f64,
    pub pearson_anchor: Vec<f64>,
    pub spearman_target: f64,
    pub corr_ratio: Option<f64>,
    pub mutual_info: Option<f64>,
    pub var_decomposition: Option<(f64, f64)>,
}

impl DiagnosticsReport {
    /// Elementwise average of several reports (e.g. across subag members).
    pub fn average(reports: &[DiagnosticsReport]) -> Option<DiagnosticsReport> {
        if reports.is_empty() {
            return None;
        }
        let nf = reports.len() as f64;
        let mean = |f: &dyn Fn(&DiagnosticsReport) -> f64| reports.iter().map(f).sum::<f64>() / nf;
        let mean_opt = |f: &dyn Fn(&DiagnosticsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let q = reports[0].pearson_anchor.len();
        let pearson_anchor = (0..q)
            .map(|j| reports.iter().map(|r| r.pearson_anchor[j]).sum::<f64>() / nf)
            .collect();
        let var_decomposition = {
            let pairs: Vec<&(f64, f64)> = reports.iter().filter_map(|r| r.var_decomposition.as_ref()).collect();
            if pairs.is_empty() {
                None
            } else {
                let k = pairs.len() as f64;
                Some((
                    pairs.iter().map(|p| p.0).sum::<f64>() / k,
                    pairs.iter().map(|p| p.1).sum::<f64>() / k,
                ))
            }
        };
        Some(DiagnosticsReport {
            rmse: mean(&|r| r.rmse),
            rmse_anchor_span: mean_opt(&|r| r.rmse_anchor_span),
            r2: mean(&|r| r.r2),
            pearson_anchor,
            spearman_target: mean(&|r| r.spearman_target),
            corr_ratio: mean_opt(&|r| r.corr_ratio),
            mutual_info: mean_opt(&|r| r.mutual_info),
            var_decomposition,
        })
    }
}

/// Evaluate a fingerprint on a dataset preprocessed with its statistics.
/// The anchor-dependence measures use a projection built from this
/// dataset's own anchors with the fingerprint's basis.
pub fn evaluate(d: &Dataset, f: &Fingerprint, bins: usize) -> Result<DiagnosticsReport> {
    let yhat = f.predict(d)?;
    let y = d.y();
    let residuals = y - &yhat;
    let rmse_val = rmse(y, &yhat)?;
    let y_mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum();
    let r2 = if sst > 0.0 {
        1.0 - residuals.norm_squared() / sst
    } else {
        f64::NAN
    };
    let spearman_target = spearman(y.as_slice(), yhat.as_slice())?;

    if d.q() == 0 {
        return Ok(DiagnosticsReport {
            rmse: rmse_val,
            rmse_anchor_span: None,
            r2,
            pearson_anchor: Vec::new(),
            spearman_target,
            corr_ratio: None,
            mutual_info: None,
            var_decomposition: None,
        });
    }

    let proj = build_projection(d.a(), &f.basis)?;
    let rmse_pi = rmse_anchor_span(&residuals, &proj)?;
    let pearson_anchor = (0..d.q())
        .map(|j| pearson(residuals.as_slice(), d.a().column(j).as_slice()))
        .collect::<Result<Vec<f64>>>()?;
    let (explained, unexplained) = variance_decomposition(&residuals, &proj)?;
    let corr = (explained / (explained + unexplained)).sqrt();
    let mi = if residuals.len() >= 10 * bins {
        Some(mutual_info(residuals.as_slice(), d.a().column(0).as_slice(), bins)?)
    } else {
        None
    };
    Ok(DiagnosticsReport {
        rmse: rmse_val,
        rmse_anchor_span: Some(rmse_pi),
        r2,
        pearson_anchor,
        spearman_target,
        corr_ratio: Some(corr),
        mutual_info: mi,
        var_decomposition: Some((explained, unexplained)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::AnchorBasis;
    use nalgebra::DMatrix;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    fn centered(mut m: DMatrix<f64>) -> DMatrix<f64> {
        for j in 0..m.ncols() {
            let mean = m.column(j).mean();
            for i in 0..m.nrows() {
                m[(i, j)] -= mean;
            }
        }
        m
    }

    #[test]
    fn rmse_hand_values() {
        let y = DVector::from_column_slice(&[1.0, 2.0]);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let yhat = DVector::from_column_slice(&[-2.0, 6.0]); // residuals [3, -4]
        assert_relative_eq!(rmse(&y, &yhat).unwrap(), 12.5f64.sqrt(), epsilon = 1e-12);
        let offset = DVector::from_column_slice(&[1.0 + 2.5, 2.0 + 2.5]);
        assert_relative_eq!(rmse(&y, &offset).unwrap(), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn rmse_anchor_span_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = centered(DMatrix::from_fn(12, 1, |_, _| rng.sample(StandardNormal)));
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        // residual orthogonal to the span
        let r = randv(&mut rng, 12);
        let orth = proj.complement_vec(&r).unwrap();
        assert!(rmse_anchor_span(&orth, &proj).unwrap() <= 1e-10);
        // residual inside the span equals its own rmse against zero
        let inside = proj.project_vec(&r).unwrap();
        let direct = rmse(&inside, &DVector::zeros(12)).unwrap();
        assert_relative_eq!(rmse_anchor_span(&inside, &proj).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn rmse_anchor_span_rank_one_hand_oracle() {
        // 4 rows, anchor e = (1,-1,0,0)/sqrt(2); P r = e (e.r)
        let e = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0, 0.0];
        let a = DMatrix::from_column_slice(4, 1, &e);
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        let r = DVector::from_column_slice(&[2.0, 1.0, -3.0, 0.5]);
        let dot = e.iter().zip(r.iter()).map(|(x, y)| x * y).sum::<f64>();
        let expected = ((dot * dot) / 4.0).sqrt();
        assert_relative_eq!(rmse_anchor_span(&r, &proj).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn spearman_rank_invariance_and_hand_value() {
        let y: [f64; 5] = [1.0, 4.0, 2.0, 8.0, 5.5];
        let monotone: Vec<f64> = y.iter().map(|v| v.exp() + 3.0).collect();
        assert_relative_eq!(spearman(&y, &monotone).unwrap(), 1.0, epsilon = 1e-12);
        let reversed: Vec<f64> = y.iter().map(|v| -v).collect();
        assert_relative_eq!(spearman(&y, &reversed).unwrap(), -1.0, epsilon = 1e-12);
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 3.0, 2.0, 4.0];
        assert_relative_eq!(spearman(&a, &b).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn spearman_ties_get_average_ranks() {
        let ranks = average_ranks(&[1.0, 2.0, 2.0, 5.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
        let err = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::UndefinedStatistic(_)));
    }

    #[test]
    fn correlation_ratio_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = centered(DMatrix::from_fn(30, 1, |_, _| rng.sample(StandardNormal)));
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        let r = randv(&mut rng, 30);
        let orth = proj.complement_vec(&r).unwrap();
        assert!(correlation_ratio(&orth, &proj).unwrap() <= 1e-8);
        // residuals equal to the anchor itself: fully explained
        let r_in = a.column(0).into_owned();
        assert_relative_eq!(correlation_ratio(&r_in, &proj).unwrap(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn correlation_ratio_equals_abs_pearson_for_linear_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = centered(DMatrix::from_fn(50, 1, |_, _| rng.sample(StandardNormal)));
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        let r = 0.6 * a.column(0).into_owned() + randv(&mut rng, 50);
        let eta = correlation_ratio(&r, &proj).unwrap();
        let rho = pearson(r.as_slice(), a.column(0).as_slice()).unwrap();
        assert_relative_eq!(eta, rho.abs(), epsilon = 1e-8);
    }

    #[test]
    fn variance_decomposition_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = centered(DMatrix::from_fn(20, 2, |_, _| rng.sample(StandardNormal)));
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        let r = randv(&mut rng, 20);
        let inside = proj.project_vec(&r).unwrap();
        let (e, u) = variance_decomposition(&inside, &proj).unwrap();
        assert!(u <= 1e-10 * e);
        let outside = proj.complement_vec(&r).unwrap();
        let (e2, u2) = variance_decomposition(&outside, &proj).unwrap();
        assert!(e2 <= 1e-10 * u2);
        // mixed residual: explained + unexplained = Var(r)
        let (e3, u3) = variance_decomposition(&r, &proj).unwrap();
        let mean = r.mean();
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 19.0;
        assert_relative_eq!(e3 + u3, var, max_relative = 1e-8);
    }

    #[test]
    fn variance_decomposition_five_row_hand_oracle() {
        let e = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0, 0.0, 0.0];
        let a = DMatrix::from_column_slice(5, 1, &e);
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        let r = DVector::from_column_slice(&[1.0, 3.0, -1.0, 2.0, 0.0]);
        let dot = e.iter().zip(r.iter()).map(|(x, y)| x * y).sum::<f64>();
        let explained = dot * dot / 4.0;
        let mean = r.mean();
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let (e_got, u_got) = variance_decomposition(&r, &proj).unwrap();
        assert_relative_eq!(e_got, explained, epsilon = 1e-12);
        assert_relative_eq!(u_got, var - explained, epsilon = 1e-12);
    }

    #[test]
    fn corr_ratio_squared_times_var_is_explained() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = centered(DMatrix::from_fn(40, 2, |_, _| rng.sample(StandardNormal)));
        let proj = build_projection(&a, &AnchorBasis::quadratic()).unwrap();
        let r = randv(&mut rng, 40) + 0.5 * a.column(0).into_owned();
        let eta = correlation_ratio(&r, &proj).unwrap();
        let (explained, unexplained) = variance_decomposition(&r, &proj).unwrap();
        assert_relative_eq!(eta * eta * (explained + unexplained), explained, max_relative = 1e-8);
    }

    #[test]
    fn enlarging_basis_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = centered(DMatrix::from_fn(60, 1, |_, _| rng.sample(StandardNormal)));
        let lin = build_projection(&a, &AnchorBasis::linear()).unwrap();
        let quad = build_projection(&a, &AnchorBasis::quadratic()).unwrap();
        for _ in 0..10 {
            let r = randv(&mut rng, 60);
            let rs_l = rmse_anchor_span(&r, &lin).unwrap();
            let rs_q = rmse_anchor_span(&r, &quad).unwrap();
            assert!(rs_q + 1e-9 >= rs_l);
            let cr_l = correlation_ratio(&r, &lin).unwrap();
            let cr_q = correlation_ratio(&r, &quad).unwrap();
            assert!(cr_q + 1e-9 >= cr_l);
        }
    }

    #[test]
    fn pearson_bounded_by_correlation_ratio_for_basis_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = centered(DMatrix::from_fn(80, 2, |_, _| rng.sample(StandardNormal)));
        let proj = build_projection(&a, &AnchorBasis::linear()).unwrap();
        for _ in 0..10 {
            let r = randv(&mut rng, 80) + 0.3 * a.column(1).into_owned();
            let eta = correlation_ratio(&r, &proj).unwrap();
            for j in 0..2 {
                let rho = pearson(r.as_slice(), a.column(j).as_slice()).unwrap();
                assert!(rho.abs() <= eta + 1e-8);
            }
        }
    }

    #[test]
    fn mutual_info_independent_vs_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mi_indep = mutual_info(&x, &y, 16).unwrap();
        assert!(mi_indep <= 0.02, "independent MI {mi_indep}");
        let mi_copy = mutual_info(&x, &x, 16).unwrap();
        assert!(mi_copy >= 2.0, "copy MI {mi_copy}");
    }

    #[test]
    fn mutual_info_shuffle_destroys_dependence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4000;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let dependent = mutual_info(&x, &y, 8).unwrap();
        let mut shuffled = y.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let broken = mutual_info(&x, &shuffled, 8).unwrap();
        assert!(dependent > 5.0 * broken.max(0.01), "dependent {dependent} broken {broken}");
    }

    #[test]
    fn mutual_info_sample_size_guard() {
        let x = vec![0.0; 50];
        assert!(matches!(mutual_info(&x, &x, 16), Err(Error::InvalidArgument(_))));
    }
}
