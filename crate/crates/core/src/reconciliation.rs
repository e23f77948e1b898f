//! Base-error covariance estimation and mapping matrices.
//!
//! Reconciled forecasts are `S G y_hat` with a mapping matrix `G` that maps
//! the stacked base forecasts to bottom-level forecasts. Bottom-up uses
//! `G = [0 | I]`; minimum-trace (minT) uses the GLS solution
//! `G = (S' W^{-1} S)^{-1} S' W^{-1}` for a base-error covariance `W`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchyVector;
use crate::pruning::PrunedSystem;

/// Relative eigenvalue floor below which a covariance counts as singular.
pub const EIGEN_FLOOR: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;
const UNBIASED_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMethod {
    BottomUp,
    MintFull,
    MintShrink,
}

impl ReconMethod {
    pub const ALL: [ReconMethod; 3] = [ReconMethod::BottomUp, ReconMethod::MintFull, ReconMethod::MintShrink];

    pub fn as_str(self) -> &'static str {
        match self {
            ReconMethod::BottomUp => "bottom_up",
            ReconMethod::MintFull => "mint_full",
            ReconMethod::MintShrink => "mint_shrink",
        }
    }
}

impl fmt::Display for ReconMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReconMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bottom_up" => Ok(ReconMethod::BottomUp),
            "mint_full" => Ok(ReconMethod::MintFull),
            "mint_shrink" => Ok(ReconMethod::MintShrink),
            other => Err(Error::InvalidParameter(format!("unknown reconciliation method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Sample,
    Shrunk,
    Supplied,
}

/// A symmetric covariance matrix with spectral diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    matrix: DMatrix<f64>,
    kind: CovarianceKind,
    sample_count: usize,
    shrink_lambda: Option<f64>,
    min_eigenvalue: f64,
    max_eigenvalue: f64,
    rank: usize,
}

impl CovarianceEstimate {
    /// Wraps a user-supplied covariance (e.g. a model-implied one).
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        Self::build(matrix, CovarianceKind::Supplied, 0, None)
    }

    fn build(matrix: DMatrix<f64>, kind: CovarianceKind, sample_count: usize, shrink_lambda: Option<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        let asym = (&matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::InvalidParameter(format!("covariance is not symmetric (deviation {asym:e})")));
        }
        let (min_eigenvalue, max_eigenvalue, rank) = spectrum(&matrix);
        Ok(Self { matrix, kind, sample_count, shrink_lambda, min_eigenvalue, max_eigenvalue, rank })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn shrink_lambda(&self) -> Option<f64> {
        self.shrink_lambda
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eigenvalue
    }

    /// Numerical rank with the relative eigenvalue floor.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_invertible(&self) -> bool {
        self.max_eigenvalue > 0.0 && self.min_eigenvalue > EIGEN_FLOOR * self.max_eigenvalue
    }

    /// `(1 - lambda) W + lambda diag(W)`.
    pub fn shrink(&self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParameter(format!("shrinkage {lambda} outside [0, 1]")));
        }
        Self::build(shrink_matrix(&self.matrix, lambda), CovarianceKind::Shrunk, self.sample_count, Some(lambda))
    }

    fn with_matrix(&self, matrix: DMatrix<f64>) -> Result<Self> {
        Self::build(matrix, self.kind, self.sample_count, self.shrink_lambda)
    }
}

fn spectrum(matrix: &DMatrix<f64>) -> (f64, f64, usize) {
    if matrix.nrows() == 0 {
        return (0.0, 0.0, 0);
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let floor = EIGEN_FLOOR * max.max(0.0);
    let rank = if max <= 0.0 { 0 } else { eig.eigenvalues.iter().filter(|&&v| v > floor).count() };
    (min, max, rank)
}

fn shrink_matrix(w: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let mut out = w * (1.0 - lambda);
    for i in 0..w.nrows() {
        out[(i, i)] = w[(i, i)];
    }
    out
}

fn sample_covariance(errors: &DMatrix<f64>) -> DMatrix<f64> {
    let n = errors.nrows();
    let means = errors.row_mean();
    let mut centered = errors.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    // exact symmetry
    for i in 0..cov.nrows() {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Sample covariance (denominator `rows - 1`) of stacked base forecast
/// errors, one period per row.
pub fn estimate_base_error_covariance(errors: &DMatrix<f64>) -> Result<CovarianceEstimate> {
    if errors.nrows() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: errors.nrows() });
    }
    if errors.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forecast errors"));
    }
    CovarianceEstimate::build(sample_covariance(errors), CovarianceKind::Sample, errors.nrows(), None)
}

/// Covariance of the pruned hierarchy, `W_z = P̌_z W P̌_z'`: under
/// stationary base errors the remaining nodes after `z` steps have the
/// error covariance of the shortest horizons of each level.
pub fn prune_covariance(w: &CovarianceEstimate, system: &PrunedSystem) -> Result<CovarianceEstimate> {
    let n = system.scheme().node_count();
    if w.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: w.dim() });
    }
    if system.z() == 0 {
        return Ok(w.clone());
    }
    let idx = system.selector_indices();
    let sub = w.matrix().select_rows(&idx).select_columns(&idx);
    w.with_matrix(sub)
}

/// A mapping matrix together with the summing matrix it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconWeights {
    method: ReconMethod,
    g: DMatrix<f64>,
    s: DMatrix<f64>,
    covariance: Option<CovarianceEstimate>,
    pseudo_inverse: bool,
}

impl ReconWeights {
    pub fn method(&self) -> ReconMethod {
        self.method
    }

    /// `G`, `n_bottom x n`.
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn covariance(&self) -> Option<&CovarianceEstimate> {
        self.covariance.as_ref()
    }

    /// Whether the pseudo-inverse fallback was used.
    pub fn used_pseudo_inverse(&self) -> bool {
        self.pseudo_inverse
    }
}

fn bottom_block_is_identity(s: &DMatrix<f64>) -> bool {
    let (n, nb) = s.shape();
    n >= nb && s.rows(n - nb, nb) == DMatrix::identity(nb, nb)
}

/// Computes the mapping matrix for `method` on summing matrix `s`.
///
/// MinT variants need `w`. They solve through Cholesky factorisations of
/// `W` and `S' W^{-1} S` and never form an explicit inverse. A covariance
/// whose smallest eigenvalue is at most `1e-10` times its largest is
/// rejected as singular unless `pseudo_inverse_fallback` is set; the
/// fallback uses the projection form with a pseudo-inverse of `U' W U`,
/// which stays unbiased for any `W`.
pub fn mapping_matrix(
    method: ReconMethod,
    s: &DMatrix<f64>,
    w: Option<&CovarianceEstimate>,
    pseudo_inverse_fallback: bool,
) -> Result<ReconWeights> {
    let (n, nb) = s.shape();
    let mut pseudo_inverse = false;
    let g = match method {
        ReconMethod::BottomUp => {
            if !bottom_block_is_identity(s) {
                return Err(Error::InvalidParameter("summing matrix has no identity bottom block".into()));
            }
            let mut g = DMatrix::zeros(nb, n);
            for j in 0..nb {
                g[(j, n - nb + j)] = 1.0;
            }
            g
        }
        ReconMethod::MintFull | ReconMethod::MintShrink => {
            let w = w.ok_or_else(|| Error::InvalidParameter(format!("{method} needs a covariance")))?;
            if w.dim() != n {
                return Err(Error::DimensionMismatch { expected: n, got: w.dim() });
            }
            let singular = || Error::SingularCovariance { min_eigenvalue: w.min_eigenvalue(), max_eigenvalue: w.max_eigenvalue() };
            let direct = if w.is_invertible() {
                w.matrix().clone().cholesky().and_then(|c| {
                    let winv_s = c.solve(s);
                    let gram = s.transpose() * &winv_s;
                    gram.cholesky().map(|g| g.solve(&winv_s.transpose()))
                })
            } else {
                None
            };
            match direct {
                Some(g) => g,
                None if pseudo_inverse_fallback => {
                    pseudo_inverse = true;
                    projection_mapping(s, w.matrix())?
                }
                None => return Err(singular()),
            }
        }
    };
    let deviation = (s * &g * s - s).amax();
    if !(deviation < UNBIASED_TOL) {
        return Err(Error::ConstraintViolated(deviation));
    }
    Ok(ReconWeights { method, g, s: s.clone(), covariance: w.cloned().filter(|_| method != ReconMethod::BottomUp), pseudo_inverse })
}

/// Minimum-trace mapping in projection form, `G = J - J W U (U' W U)^+ U'`
/// with `U' = [I | -C]` for `S = [C; I]` and `J = [0 | I]`. It needs no
/// inverse of `W` and satisfies `G S = I` for any `W`; for invertible `W`
/// and `U' W U` it equals the usual formula.
fn projection_mapping(s: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !bottom_block_is_identity(s) {
        return Err(Error::InvalidParameter("summing matrix has no identity bottom block".into()));
    }
    let (n, nb) = s.shape();
    let na = n - nb;
    let mut g = DMatrix::zeros(nb, n);
    for j in 0..nb {
        g[(j, na + j)] = 1.0;
    }
    if na == 0 {
        return Ok(g);
    }
    let mut ut = DMatrix::zeros(na, n);
    ut.view_mut((0, 0), (na, na)).fill_with_identity();
    ut.view_mut((0, na), (na, nb)).copy_from(&(-s.rows(0, na)));
    let wu = w * ut.transpose();
    let core = pseudo_inverse_of(&(&ut * &wu));
    Ok(g - wu.rows(na, nb) * core * ut)
}

fn pseudo_inverse_of(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let floor = EIGEN_FLOOR * max;
    let inv = eig.eigenvalues.map(|v| if v > floor { 1.0 / v } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Reconciled forecasts `S G base`.
pub fn reconcile(weights: &ReconWeights, base: &[f64]) -> Result<Vec<f64>> {
    if base.len() != weights.g.ncols() {
        return Err(Error::DimensionMismatch { expected: weights.g.ncols(), got: base.len() });
    }
    let x = nalgebra::DVector::from_column_slice(base);
    Ok((&weights.s * (&weights.g * x)).iter().copied().collect())
}

/// Outcome of the cross-validated shrinkage search.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageSelection {
    pub lambda: f64,
    /// `(lambda, score)` over the grid; singular candidates score infinity.
    pub scores: Vec<(f64, f64)>,
    /// Set when the sample was too small for cross-validation and the
    /// diagonal target (`lambda = 1`) was returned.
    pub insufficient_data: bool,
}

/// Picks the shrinkage intensity on the grid `0, 0.1, ..., 1` by K-fold
/// cross-validation over contiguous blocks of rows. A candidate scores the
/// summed squared Frobenius distance between the shrunk training-fold
/// covariance and the held-out fold's sample covariance. Singular shrunk
/// covariances are invalid. Ties go to the larger lambda.
pub fn select_shrinkage(errors: &DMatrix<f64>, folds: usize) -> ShrinkageSelection {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rows = errors.nrows();
    let fallback = |scores| ShrinkageSelection { lambda: 1.0, scores, insufficient_data: true };
    if folds < 2 || rows < 2 * folds {
        return fallback(Vec::new());
    }
    let n = errors.ncols();
    let mut totals = vec![0.0; grid.len()];
    for f in 0..folds {
        let lo = f * rows / folds;
        let hi = (f + 1) * rows / folds;
        let test: Vec<usize> = (lo..hi).collect();
        let train: Vec<usize> = (0..rows).filter(|r| !(lo..hi).contains(r)).collect();
        let held = sample_covariance(&errors.select_rows(&test));
        let fit = sample_covariance(&errors.select_rows(&train));
        let full_rank = train.len() > n && spectrum(&fit).2 == n;
        let diag_max = fit.diagonal().max();
        let diag_positive = diag_max > 0.0 && fit.diagonal().min() > EIGEN_FLOOR * diag_max;
        for (t, &lambda) in totals.iter_mut().zip(&grid) {
            let valid = if lambda == 0.0 { full_rank } else { diag_positive };
            if !valid {
                *t = f64::INFINITY;
                continue;
            }
            *t += (shrink_matrix(&fit, lambda) - &held).norm_squared();
        }
    }
    let scores: Vec<(f64, f64)> = grid.iter().copied().zip(totals.iter().copied()).collect();
    let mut best: Option<(f64, f64)> = None;
    for &(lambda, score) in &scores {
        if score.is_finite() && best.is_none_or(|(_, s)| score <= s) {
            best = Some((lambda, score));
        }
    }
    match best {
        Some((lambda, _)) => ShrinkageSelection { lambda, scores, insufficient_data: false },
        None => fallback(scores),
    }
}

/// Set-negative-to-zero heuristic: clip negative bottom-level forecasts to
/// zero and push each clipping difference up to the parent node, repeating
/// level by level to the top. The result is coherent but no longer
/// unbiased.
///
/// Non-nested schemes have no single parent per node; there the bottom
/// differences are added to every upper node whose window contains them.
pub fn set_negative_to_zero(reconciled: &HierarchyVector) -> HierarchyVector {
    let scheme = reconciled.scheme();
    let mut values = reconciled.values().to_vec();
    let offsets = scheme.level_offsets();
    if scheme.is_tree() {
        // Each node carries its children's accumulated differences plus its
        // own clipping difference on to its parent.
        let mut carried = vec![0.0; offsets.last().expect("scheme has levels").len];
        for q in (0..offsets.len()).rev() {
            let lvl = offsets[q];
            for (u, c) in carried.iter_mut().enumerate() {
                let v = values[lvl.start + u] + *c;
                let clipped = v.max(0.0);
                values[lvl.start + u] = clipped;
                *c += clipped - v;
            }
            if q > 0 {
                let ratio = offsets[q - 1].k / lvl.k;
                carried = carried.chunks_exact(ratio).map(|ch| ch.iter().sum()).collect();
            }
        }
    } else {
        let bottom = *offsets.last().expect("scheme has levels");
        let diffs: Vec<f64> = values[bottom.start..].iter().map(|&v| (-v).max(0.0)).collect();
        for lvl in &offsets[..offsets.len() - 1] {
            for (u, chunk) in diffs.chunks_exact(lvl.k).enumerate() {
                values[lvl.start + u] += chunk.iter().sum::<f64>();
            }
        }
        for v in &mut values[bottom.start..] {
            *v = v.max(0.0);
        }
    }
    HierarchyVector::new(scheme.clone(), values, reconciled.period()).expect("same length")
}
