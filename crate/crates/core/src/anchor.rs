//! Anchor projection construction, the gamma transformation, and the
//! closed-form ridge-anchor estimator.
//!
//! The estimator minimizes
//!
//! ```text
//! ||(I - P)(Y - X b)||^2 + gamma ||P (Y - X b)||^2 + lambda ||b||^2
//! ```
//!
//! where `P` projects onto the column space of the (optionally basis-expanded,
//! always column-centered) anchor matrix. The problem is solved as ridge
//! regression on the transformed pair `(X~, Y~)` with
//! `X~ = (I - P) X + sqrt(gamma) P X`, via a Cholesky solve of the normal
//! equations; the projector is applied through an orthonormal basis of the
//! anchor span, never as an n x n matrix.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroupSplit, PreprocessingState};
use crate::error::{Error, Result};

/// Numerical rank tolerance: singular values below this multiple of the
/// largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

/// One scalar basis function applied column-wise to the anchor matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisTerm {
    Identity,
    Square,
    Abs,
    /// Elementwise integer power, e.g. `Power(3)` for cubes.
    Power(u32),
}

impl BasisTerm {
    fn apply(&self, v: f64) -> f64 {
        match self {
            BasisTerm::Identity => v,
            BasisTerm::Square => v * v,
            BasisTerm::Abs => v.abs(),
            BasisTerm::Power(k) => v.powi(*k as i32),
        }
    }

    pub fn name(&self) -> String {
        match self {
            BasisTerm::Identity => "identity".into(),
            BasisTerm::Square => "square".into(),
            BasisTerm::Abs => "abs".into(),
            BasisTerm::Power(k) => format!("pow{k}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(BasisTerm::Identity),
            "square" => Ok(BasisTerm::Square),
            "abs" => Ok(BasisTerm::Abs),
            other => {
                if let Some(k) = other.strip_prefix("pow") {
                    let k: u32 = k
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("unknown basis term '{other}'")))?;
                    Ok(BasisTerm::Power(k))
                } else {
                    Err(Error::InvalidArgument(format!("unknown basis term '{other}'")))
                }
            }
        }
    }
}

/// Ordered list of basis functions; the identity is always first so the
/// linear anchor span is contained in every expansion.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorBasis {
    terms: Vec<BasisTerm>,
}

impl AnchorBasis {
    pub fn new(terms: Vec<BasisTerm>) -> Result<Self> {
        if terms.first() != Some(&BasisTerm::Identity) {
            return Err(Error::InvalidArgument(
                "anchor basis must start with the identity term".into(),
            ));
        }
        Ok(AnchorBasis { terms })
    }

    /// The plain linear anchor: identity only.
    pub fn linear() -> Self {
        AnchorBasis {
            terms: vec![BasisTerm::Identity],
        }
    }

    /// Identity plus elementwise square.
    pub fn quadratic() -> Self {
        AnchorBasis {
            terms: vec![BasisTerm::Identity, BasisTerm::Square],
        }
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        let terms = names.iter().map(|s| BasisTerm::parse(s)).collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.name()).collect()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn expanded_cols(&self, q: usize) -> usize {
        q * self.terms.len()
    }

    /// Apply every term column-wise: the result has q * |terms| columns laid
    /// out term-major, `[h1(A) h2(A) ...]`.
    pub fn expand(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, q) = (a.nrows(), a.ncols());
        let mut out = DMatrix::zeros(n, self.expanded_cols(q));
        for (t, term) in self.terms.iter().enumerate() {
            for j in 0..q {
                for i in 0..n {
                    out[(i, t * q + j)] = term.apply(a[(i, j)]);
                }
            }
        }
        out
    }

    /// Human-readable name of expanded column `idx`.
    fn column_name(&self, q: usize, idx: usize) -> String {
        let term = &self.terms[idx / q];
        format!("{}(a{})", term.name(), idx % q)
    }
}

/// Intervention-strength and ridge hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub gamma: f64,
    pub lambda: f64,
}

impl HyperParams {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(HyperParams { gamma, lambda })
    }
}

/// Projector onto the column space of the centered, basis-expanded anchor
/// matrix, held as an orthonormal basis (n x r) so products with n-row
/// matrices cost O(n r) per column.
#[derive(Clone, Debug)]
pub struct AnchorProjection {
    basis: AnchorBasis,
    q_basis: DMatrix<f64>,
    anchor_cols: usize,
}

impl AnchorProjection {
    pub fn basis(&self) -> &AnchorBasis {
        &self.basis
    }

    pub fn n(&self) -> usize {
        self.q_basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.q_basis.ncols()
    }

    pub fn anchor_cols(&self) -> usize {
        self.anchor_cols
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n() {
            return Err(Error::Dimension(format!(
                "projection built for {} rows applied to {}",
                self.n(),
                rows
            )));
        }
        Ok(())
    }

    /// Coordinates of each column of `m` in the anchor span (r x cols).
    pub fn span_coords(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_rows(m.nrows())?;
        Ok(self.q_basis.tr_mul(m))
    }

    pub fn span_coords_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rows(v.len())?;
        Ok(self.q_basis.tr_mul(v).column(0).into_owned())
    }

    /// `P m`.
    pub fn project(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.q_basis * self.span_coords(m)?)
    }

    pub fn project_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.q_basis * self.span_coords_vec(v)?)
    }

    /// `(I - P) m`.
    pub fn complement(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(m - self.project(m)?)
    }

    pub fn complement_vec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(v - self.project_vec(v)?)
    }
}

/// Build the projector onto the span of the centered expanded anchors.
///
/// Every expanded column is centered before factorization, so the span never
/// contains the constant vector and projected vectors have exact zero mean.
/// A rank-deficient expansion is rejected, naming the dependent columns.
pub fn build_projection(a: &DMatrix<f64>, basis: &AnchorBasis) -> Result<AnchorProjection> {
    let n = a.nrows();
    let q = a.ncols();
    if q == 0 {
        return Ok(AnchorProjection {
            basis: basis.clone(),
            q_basis: DMatrix::zeros(n, 0),
            anchor_cols: 0,
        });
    }
    let cols = basis.expanded_cols(q);
    if n <= cols {
        return Err(Error::InvalidArgument(format!(
            "need more rows ({n}) than expanded anchor columns ({cols})"
        )));
    }
    let mut expanded = basis.expand(a);
    for j in 0..cols {
        let mean = expanded.column(j).sum() / n as f64;
        for i in 0..n {
            expanded[(i, j)] -= mean;
        }
    }
    let svd = nalgebra::SVD::new(expanded.clone(), true, false);
    let smax = svd.singular_values.max();
    let rank = if smax > 0.0 {
        svd.singular_values.iter().filter(|s| **s > RANK_TOL * smax).count()
    } else {
        0
    };
    if rank < cols {
        return Err(Error::RankDeficient {
            columns: dependent_columns(&expanded, rank, basis, q),
        });
    }
    let u = svd.u.expect("svd with u requested");
    Ok(AnchorProjection {
        basis: basis.clone(),
        q_basis: u.columns(0, cols).into_owned(),
        anchor_cols: q,
    })
}

/// Identify which expanded columns are linearly dependent, using the pivot
/// order of a column-pivoted QR: pivots beyond the numerical rank name the
/// redundant columns.
fn dependent_columns(expanded: &DMatrix<f64>, rank: usize, basis: &AnchorBasis, q: usize) -> Vec<String> {
    let cols = expanded.ncols();
    let qr = expanded.clone().col_piv_qr();
    let mut order = DMatrix::from_fn(1, cols, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    (rank..cols)
        .map(|k| basis.column_name(q, order[(0, k)] as usize))
        .collect()
}

/// Transformed pair `X~ = X + (sqrt(gamma) - 1) P X`, same for Y.
pub fn transform(
    d: &Dataset,
    proj: &AnchorProjection,
    gamma: f64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    proj.check_rows(d.n())?;
    let c = gamma.sqrt() - 1.0;
    let xt = d.x() + proj.project(d.x())?.scale(c);
    let yt = d.y() + proj.project_vec(d.y())?.scale(c);
    Ok((xt, yt))
}

/// Solve `(gram + lambda I) b = rhs` by Cholesky. Refuses to invert a
/// singular system when `lambda = 0`.
pub(crate) fn solve_penalized(gram: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let p = gram.nrows();
    let mut g = gram.clone();
    for j in 0..p {
        g[(j, j)] += lambda;
    }
    match Cholesky::new(g) {
        Some(chol) => Ok(chol.solve(rhs)),
        None => {
            if lambda == 0.0 {
                Err(Error::Singular(
                    "normal equations are rank deficient at lambda = 0; set lambda > 0".into(),
                ))
            } else {
                Err(Error::Singular("normal equations are not positive definite".into()))
            }
        }
    }
}

/// The fitted coefficient map together with everything needed to apply it to
/// compatible data.
#[derive(Clone, Debug)]
pub struct Fingerprint {
    pub beta: DVector<f64>,
    pub hyper: HyperParams,
    pub basis: AnchorBasis,
    pub split: Option<GroupSplit>,
    pub preprocessing: PreprocessingState,
}

impl Fingerprint {
    /// Predicted target for every row of `d`, which must have been
    /// preprocessed with the same statistics as the training data.
    pub fn predict(&self, d: &Dataset) -> Result<DVector<f64>> {
        if d.p() != self.beta.len() {
            return Err(Error::Dimension(format!(
                "fingerprint has {} coefficients, data has {} columns",
                self.beta.len(),
                d.p()
            )));
        }
        if d.preprocessing().digest() != self.preprocessing.digest() {
            return Err(Error::Preprocessing(
                "dataset preprocessing does not match the fingerprint's stored statistics".into(),
            ));
        }
        Ok(d.x() * &self.beta)
    }

    /// Predict from a bare matrix. The caller is responsible for having
    /// applied the fingerprint's preprocessing statistics.
    pub fn predict_rows(&self, rows: &DMatrix<f64>) -> Result<DVector<f64>> {
        if rows.ncols() != self.beta.len() {
            return Err(Error::Dimension(format!(
                "fingerprint has {} coefficients, rows have {} columns",
                self.beta.len(),
                rows.ncols()
            )));
        }
        Ok(rows * &self.beta)
    }

    pub fn to_record(&self) -> FingerprintRecord {
        FingerprintRecord {
            beta: self.beta.iter().copied().collect(),
            gamma: self.hyper.gamma,
            lambda: self.hyper.lambda,
            basis: self.basis.names(),
            preprocessing_digest: self.preprocessing.digest(),
            split_digest: self.split.as_ref().map(|s| s.digest()),
        }
    }
}

/// Serialized form of a fingerprint: coefficients, hyperparameters, basis
/// names, and digests of the preprocessing and split that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FingerprintRecord {
    pub beta: Vec<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub basis: Vec<String>,
    pub preprocessing_digest: String,
    pub split_digest: Option<String>,
}

impl FingerprintRecord {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn check_fit_inputs(d: &Dataset, proj: &AnchorProjection) -> Result<()> {
    if !d.is_regression_ready() {
        return Err(Error::Preprocessing(
            "fit requires centered data: run standardize and center_targets first".into(),
        ));
    }
    proj.check_rows(d.n())
}

/// Closed-form anchor-ridge fit: solves the normal equations of the
/// transformed problem with a p x p Cholesky factorization.
pub fn fit(d: &Dataset, proj: &AnchorProjection, hyper: HyperParams) -> Result<Fingerprint> {
    check_fit_inputs(d, proj)?;
    HyperParams::new(hyper.gamma, hyper.lambda)?;
    let (xt, yt) = transform(d, proj, hyper.gamma)?;
    let gram = xt.tr_mul(&xt);
    let rhs = xt.tr_mul(&yt).column(0).into_owned();
    let beta = solve_penalized(&gram, &rhs, hyper.lambda)?;
    Ok(Fingerprint {
        beta,
        hyper,
        basis: proj.basis.clone(),
        split: None,
        preprocessing: d.preprocessing().clone(),
    })
}

/// The gamma -> infinity limit: ridge regression of `P Y` on `P X`,
/// minimizing only the anchor-span residual component.
pub fn fit_iv_limit(d: &Dataset, proj: &AnchorProjection, lambda: f64) -> Result<Fingerprint> {
    check_fit_inputs(d, proj)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    // (P X)' (P X) = W' W with W the span coordinates of X.
    let w = proj.span_coords(d.x())?;
    let wy = proj.span_coords_vec(d.y())?;
    let gram = w.tr_mul(&w);
    let rhs = w.tr_mul(&wy).column(0).into_owned();
    let beta = solve_penalized(&gram, &rhs, lambda)?;
    Ok(Fingerprint {
        beta,
        hyper: HyperParams {
            gamma: f64::INFINITY,
            lambda,
        },
        basis: proj.basis.clone(),
        split: None,
        preprocessing: d.preprocessing().clone(),
    })
}
