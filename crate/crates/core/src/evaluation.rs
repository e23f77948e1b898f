//! Error metrics and diagnostics for updated forecasts.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arma::aggregate_ar1;
use crate::error::{Error, Result};
use crate::hierarchy::{AggregationScheme, HierarchyVector};
use crate::pruning::PrunedSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RrmseFlag {
    /// The base forecasts were error-free, so the ratio is undefined.
    ZeroDenominator,
}

/// Relative RMSE of one level with its raw squared-error sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rrmse {
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub flag: Option<RrmseFlag>,
}

impl Rrmse {
    pub fn from_sums(numerator: f64, denominator: f64) -> Self {
        if denominator > 0.0 {
            Self { value: (numerator / denominator).sqrt(), numerator, denominator, flag: None }
        } else {
            Self {
                value: if numerator > 0.0 { f64::INFINITY } else { f64::NAN },
                numerator,
                denominator,
                flag: Some(RrmseFlag::ZeroDenominator),
            }
        }
    }
}

fn sse(actual: &[f64], pred: &[f64]) -> f64 {
    actual.iter().zip(pred).map(|(y, p)| (y - p).powi(2)).sum()
}

/// `sqrt(sum (y - fair)^2 / sum (y - base)^2)` over aligned values, where
/// `base` are the non-updated base forecasts.
pub fn rrmse_level(actual: &[f64], fair: &[f64], base: &[f64]) -> Result<Rrmse> {
    if fair.len() != actual.len() || base.len() != actual.len() {
        return Err(Error::DimensionMismatch {
            expected: actual.len(),
            got: if fair.len() != actual.len() { fair.len() } else { base.len() },
        });
    }
    Ok(Rrmse::from_sums(sse(actual, fair), sse(actual, base)))
}

/// Per-level rRMSE for one `(z, method)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub z: usize,
    pub method: String,
    pub levels: Vec<(usize, Rrmse)>,
    /// Arithmetic mean of the per-level values.
    pub overall: f64,
}

impl ErrorReport {
    pub fn new(z: usize, method: impl Into<String>, levels: Vec<(usize, Rrmse)>) -> Self {
        let overall = levels.iter().map(|(_, r)| r.value).sum::<f64>() / levels.len() as f64;
        Self { z, method: method.into(), levels, overall }
    }

    pub fn level(&self, k: usize) -> Option<&Rrmse> {
        self.levels.iter().find(|(l, _)| *l == k).map(|(_, r)| r)
    }
}

/// Builds a report from aligned per-period vectors: actuals, fair-stacked
/// predictions and `z = 0` base forecasts. Squared errors are pooled over
/// periods before taking the ratio.
pub fn error_report(
    actual: &[HierarchyVector],
    fair: &[HierarchyVector],
    base: &[HierarchyVector],
    z: usize,
    method: &str,
) -> Result<ErrorReport> {
    if actual.is_empty() || fair.len() != actual.len() || base.len() != actual.len() {
        return Err(Error::DimensionMismatch { expected: actual.len().max(1), got: fair.len().min(base.len()) });
    }
    let scheme = actual[0].scheme();
    let mut levels = Vec::new();
    for &k in scheme.levels() {
        let (mut num, mut den) = (0.0, 0.0);
        for ((y, f), b) in actual.iter().zip(fair).zip(base) {
            let y = y.level(k)?;
            let r = rrmse_level(y, f.level(k)?, b.level(k)?)?;
            num += r.numerator;
            den += r.denominator;
        }
        levels.push((k, Rrmse::from_sums(num, den)));
    }
    Ok(ErrorReport::new(z, method, levels))
}

/// Fair comparison vector: slots already observed after `z` steps take the
/// `z = 0` forecasts, the rest take the updated ones. Observed values never
/// enter an error this way and every level keeps `M_k` errors.
pub fn stack_fair(at_zero: &HierarchyVector, at_z: &HierarchyVector, system: &PrunedSystem) -> Result<HierarchyVector> {
    let scheme = system.scheme();
    if at_zero.scheme() != scheme || at_z.scheme() != scheme {
        return Err(Error::Consistency("forecast vectors use a different scheme".into()));
    }
    let mut values = at_z.values().to_vec();
    for lvl in scheme.level_offsets() {
        let seen = system.z() / lvl.k;
        values[lvl.start..lvl.start + seen].copy_from_slice(&at_zero.values()[lvl.start..lvl.start + seen]);
    }
    HierarchyVector::new(scheme.clone(), values, at_z.period())
}

/// Sample trace comparison for one block of the pruned hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceComparison {
    pub base_trace: f64,
    pub reconciled_trace: f64,
    /// `base_trace - reconciled_trace`; non-negative when reconciliation helps.
    pub margin: f64,
    /// Standard error of the reconciled trace estimate.
    pub reconciled_se: f64,
    /// Standard error of the paired margin estimate.
    pub margin_se: f64,
}

impl TraceComparison {
    /// Whether the margin is non-negative up to `n_se` standard errors.
    pub fn holds_within(&self, n_se: f64) -> bool {
        self.margin >= -n_se * self.margin_se
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub z: usize,
    pub samples: usize,
    pub total: TraceComparison,
    /// Per level over its remaining nodes; levels fully observed are omitted.
    pub levels: Vec<(usize, TraceComparison)>,
}

pub const MIN_TRACE_SAMPLES: usize = 30;

/// Compares `tr Cov(P_z(y - y_tilde))` with `tr Cov(P_z(y - y_hat))` over a
/// sample of periods, in total and per level block. `base` holds the updated
/// base forecasts and `reconciled` the restored forecasts for the same `z`.
pub fn trace_diagnostic(
    actual: &[HierarchyVector],
    base: &[HierarchyVector],
    reconciled: &[HierarchyVector],
    system: &PrunedSystem,
) -> Result<TraceReport> {
    let n = actual.len();
    if n < MIN_TRACE_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_TRACE_SAMPLES, got: n });
    }
    if base.len() != n || reconciled.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: base.len().min(reconciled.len()) });
    }
    let kept = system.kept_indices();
    let errors = |pred: &[HierarchyVector]| DMatrix::from_fn(n, kept.len(), |r, c| actual[r].values()[kept[c]] - pred[r].values()[kept[c]]);
    let eb = errors(base);
    let er = errors(reconciled);

    let all: Vec<usize> = (0..kept.len()).collect();
    let total = compare_traces(&eb, &er, &all);
    let mut levels = Vec::new();
    let mut col = 0;
    for l in system.levels() {
        if l.remaining > 0 {
            let cols: Vec<usize> = (col..col + l.remaining).collect();
            levels.push((l.k, compare_traces(&eb, &er, &cols)));
        }
        col += l.remaining;
    }
    Ok(TraceReport { z: system.z(), samples: n, total, levels })
}

/// Per-period contributions `sum_j (e_tj - mean_j)^2` whose mean, scaled by
/// `n/(n-1)`, is the sample covariance trace.
fn trace_terms(e: &DMatrix<f64>, cols: &[usize]) -> Vec<f64> {
    let means: Vec<f64> = cols.iter().map(|&c| e.column(c).mean()).collect();
    (0..e.nrows()).map(|r| cols.iter().zip(&means).map(|(&c, m)| (e[(r, c)] - m).powi(2)).sum()).collect()
}

fn mean_and_se(xs: &[f64], scale: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean * scale, (var / n).sqrt() * scale)
}

fn compare_traces(eb: &DMatrix<f64>, er: &DMatrix<f64>, cols: &[usize]) -> TraceComparison {
    let n = eb.nrows() as f64;
    let scale = n / (n - 1.0);
    let tb = trace_terms(eb, cols);
    let tr = trace_terms(er, cols);
    let diff: Vec<f64> = tb.iter().zip(&tr).map(|(b, r)| b - r).collect();
    let (base_trace, _) = mean_and_se(&tb, scale);
    let (reconciled_trace, reconciled_se) = mean_and_se(&tr, scale);
    let (margin, margin_se) = mean_and_se(&diff, scale);
    TraceComparison { base_trace, reconciled_trace, margin, reconciled_se, margin_se }
}

/// Closed-form MSEs of bottom-up forecasts for a bottom-level AR(1) on the
/// hierarchy `{m, 1}` after `z` observed steps, with the true model.
///
/// Returns `(bottom, top)`: the summed squared-error expectation over the
/// `m - z` remaining bottom slots, and the top-level MSE
/// `sigma2 * a' Phi Phi' a` with `Phi` the lower-triangular matrix of
/// moving-average weights `phi^(i-j)` and `a` the indicator of the remaining
/// horizons.
pub fn ar1_closed_form_mse(phi: f64, sigma2: f64, m: usize, z: usize) -> Result<(f64, f64)> {
    if !(phi.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("|phi| = {} must be below 1", phi.abs())));
    }
    if z >= m {
        return Err(Error::OutOfRange { z, m });
    }
    let h = m - z;
    let phi2 = phi * phi;
    let bottom =
        if phi == 0.0 { sigma2 * h as f64 } else { sigma2 / (1.0 - phi2) * (1..=h).map(|j| 1.0 - phi2.powi(j as i32)).sum::<f64>() };
    // a' Phi is the vector of column sums of the leading h x h block.
    let top = sigma2 * (1..=h).map(|col| (0..=h - col).map(|d| phi.powi(d as i32)).sum::<f64>().powi(2)).sum::<f64>();
    Ok((bottom, top))
}

/// Model-implied one-period-ahead base error covariance for a bottom-level
/// AR(1) on `{m, 1}`, with the bottom forecast from the AR(1) itself and the
/// top forecast from the exact aggregated ARMA(1,1) on infinite past.
///
/// The top error is the bottom-up error plus a term determined by the past,
/// uncorrelated with future bottom innovations; its variance follows from
/// the aggregated innovation variance.
pub fn ar1_base_error_covariance(phi: f64, sigma2: f64, m: usize) -> Result<DMatrix<f64>> {
    if !(phi.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("|phi| = {} must be below 1", phi.abs())));
    }
    AggregationScheme::new(vec![m, 1])?;
    let sigma_b =
        DMatrix::from_fn(m, m, |j, l| (0..=j.min(l)).map(|s| sigma2 * phi.powi((j - s) as i32) * phi.powi((l - s) as i32)).sum::<f64>());
    let bottom_up_var = sigma_b.sum();
    let top_innovation = aggregate_ar1(phi, sigma2, 0.0, m)?.sigma2();
    let mut w = DMatrix::zeros(m + 1, m + 1);
    w[(0, 0)] = top_innovation;
    for j in 0..m {
        let c = sigma_b.row(j).sum();
        w[(0, j + 1)] = c;
        w[(j + 1, 0)] = c;
    }
    w.view_mut((1, 1), (m, m)).copy_from(&sigma_b);
    debug_assert!(top_innovation >= bottom_up_var - 1e-9);
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::build_pruned_system;

    fn scheme(ks: &[usize]) -> AggregationScheme {
        AggregationScheme::new(ks.to_vec()).unwrap()
    }

    #[test]
    fn rrmse_trivial_cases() {
        let y = [3.0, 1.0, 2.0];
        let b = [4.0, 1.5, 2.5];
        assert_eq!(rrmse_level(&y, &b, &b).unwrap().value, 1.0);
        assert_eq!(rrmse_level(&y, &y, &b).unwrap().value, 0.0);
    }

    #[test]
    fn rrmse_hand_example() {
        // top level of y=(3,1,2), y_hat=(4,1,2), y_tilde=(3.5,1.5,2.0)
        let r = rrmse_level(&[3.0], &[3.5], &[4.0]).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.flag, None);
    }

    #[test]
    fn zero_denominator_is_flagged() {
        let r = rrmse_level(&[1.0, 2.0], &[1.5, 2.0], &[1.0, 2.0]).unwrap();
        assert!(r.value.is_infinite());
        assert_eq!(r.flag, Some(RrmseFlag::ZeroDenominator));
    }

    #[test]
    fn overall_is_level_mean() {
        let s = scheme(&[2, 1]);
        let y = HierarchyVector::new(s.clone(), vec![3., 1., 2.], 1).unwrap();
        let base = HierarchyVector::new(s.clone(), vec![4., 1., 2.5], 1).unwrap();
        let rec = HierarchyVector::new(s, vec![3.5, 1.5, 2.0], 1).unwrap();
        let r = error_report(&[y], &[rec], &[base], 0, "mint_full").unwrap();
        assert_eq!(r.level(2).unwrap().value, 0.5);
        let bottom = r.level(1).unwrap().value;
        assert!((bottom - (0.25f64 / 0.25).sqrt()).abs() < 1e-15);
        assert_eq!(r.overall, (0.5 + bottom) / 2.0);
    }

    #[test]
    fn fair_stacking_slots() {
        let s = scheme(&[4, 1]);
        let zero = HierarchyVector::new(s.clone(), vec![10., 1., 2., 3., 4.], 1).unwrap();
        let at_z = HierarchyVector::new(s.clone(), vec![20., 5., 6., 7., 8.], 1).unwrap();
        let fair = stack_fair(&zero, &at_z, &build_pruned_system(&s, 2).unwrap()).unwrap();
        assert_eq!(fair.values(), &[20., 1., 2., 7., 8.]);
        let fair0 = stack_fair(&zero, &at_z, &build_pruned_system(&s, 0).unwrap()).unwrap();
        assert_eq!(fair0, at_z);
    }

    #[test]
    fn closed_form_values() {
        let (b, t) = ar1_closed_form_mse(0.5, 1.0, 4, 0).unwrap();
        assert!((b - 4.890625).abs() < 1e-12);
        // column sums of Phi for phi = .5, h = 4: 1.875, 1.75, 1.5, 1
        assert!((t - (1.875f64.powi(2) + 1.75f64.powi(2) + 1.5f64.powi(2) + 1.0)).abs() < 1e-12);
        for z in 0..5 {
            assert_eq!(ar1_closed_form_mse(0.0, 2.0, 5, z).unwrap(), (2.0 * (5 - z) as f64, 2.0 * (5 - z) as f64));
        }
        assert!(ar1_closed_form_mse(1.0, 1.0, 4, 0).is_err());
        assert!(ar1_closed_form_mse(0.5, 1.0, 4, 4).is_err());
    }

    #[test]
    fn closed_form_non_increasing_in_z() {
        for i in -9..=9 {
            let phi = i as f64 / 10.0;
            let vals: Vec<(f64, f64)> = (0..12).map(|z| ar1_closed_form_mse(phi, 1.0, 12, z).unwrap()).collect();
            for w in vals.windows(2) {
                assert!(w[1].0 <= w[0].0 + 1e-12 && w[1].1 <= w[0].1 + 1e-12, "phi={phi}");
            }
        }
    }

    #[test]
    fn true_covariance_structure() {
        let w = ar1_base_error_covariance(0.5, 1.0, 4).unwrap();
        assert_eq!(w[(1, 1)], 1.0);
        assert!((w[(2, 2)] - 1.25).abs() < 1e-15);
        assert!((w[(1, 2)] - 0.5).abs() < 1e-15);
        // bottom-up top error variance equals the closed form at z = 0
        let (_, top) = ar1_closed_form_mse(0.5, 1.0, 4, 0).unwrap();
        assert!((w.view((1, 1), (4, 4)).sum() - top).abs() < 1e-12);
        assert!(w[(0, 0)] >= top);
        assert!((&w - w.transpose()).amax() == 0.0);
    }

    #[test]
    fn trace_equality_for_identical_forecasts() {
        let s = scheme(&[4, 1]);
        let sys = build_pruned_system(&s, 1).unwrap();
        let make = |shift: f64| -> Vec<HierarchyVector> {
            (0..40)
                .map(|t| {
                    let b: Vec<f64> = (0..4).map(|j| ((t * 5 + j * 3) % 7) as f64 + shift).collect();
                    HierarchyVector::from_bottom(&s, &b, t + 1).unwrap()
                })
                .collect()
        };
        let y = make(0.0);
        let f: Vec<HierarchyVector> = make(0.5).into_iter().rev().collect();
        let rep = trace_diagnostic(&y, &f, &f, &sys).unwrap();
        assert_eq!(rep.total.margin, 0.0);
        assert!(rep.total.holds_within(0.0));
        assert_eq!(rep.levels.len(), 2);
        assert!(trace_diagnostic(&y[..10], &f[..10], &f[..10], &sys).is_err());
    }
}
