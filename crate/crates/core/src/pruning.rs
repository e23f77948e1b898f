//! Pruning of partially observed periods.
//!
//! After `z` bottom-level steps of the current period have been observed,
//! level `k` has `floor(z/k)` observed nodes. Those nodes are cut from the
//! hierarchy, and every remaining node whose window overlaps the observed
//! stretch has the observed bottom values subtracted from its forecast. The
//! pruned hierarchy only spans the `m - z` unobserved bottom steps and can be
//! reconciled like any other hierarchy.
//!
//! In matrix form, `y^(r) = P_z y_hat - R_z y` with `P_z` keeping the last
//! `M_k - floor(z/k)` nodes of each level and `R_z` selecting the observed
//! bottom slots of the stacked vector `y`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::hierarchy::{build_summing_matrix, AggregationScheme, HierarchyVector, ObservedPeriod};

/// One level of a pruned hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrunedLevel {
    pub k: usize,
    /// `floor(z/k)`.
    pub observed: usize,
    /// `M_k - floor(z/k)`.
    pub remaining: usize,
    /// Start of this level in the full stacked vector.
    pub full_start: usize,
    /// Start of this level in the pruned vector.
    pub pruned_start: usize,
}

/// Pruning and reduction operators for a given number of observed steps.
///
/// Only the level bookkeeping and the sparse reduction rows are stored; the
/// dense matrices are built on request.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedSystem {
    scheme: AggregationScheme,
    z: usize,
    levels: Vec<PrunedLevel>,
    // For each pruned node: 0-based bottom positions (within the period)
    // whose observed values are subtracted.
    reductions: Vec<Vec<usize>>,
}

/// Builds the pruned system for `z` observed bottom steps, `0 <= z < m`.
///
/// The reduction of node `(k, u)`, `floor(z/k) < u <= M_k`, subtracts the
/// observed bottom values `y^[1]_w` for `w = k(u-1)+1, ..., z`; only the
/// first unobserved node of each level can overlap the observed stretch.
pub fn build_pruned_system(scheme: &AggregationScheme, z: usize) -> Result<PrunedSystem> {
    let m = scheme.m();
    if z >= m {
        return Err(Error::OutOfRange { z, m });
    }
    let mut levels = Vec::with_capacity(scheme.levels().len());
    let mut reductions = Vec::new();
    let mut pruned_start = 0;
    for slice in scheme.level_offsets() {
        let observed = z / slice.k;
        let remaining = slice.len - observed;
        levels.push(PrunedLevel { k: slice.k, observed, remaining, full_start: slice.start, pruned_start });
        for u in observed + 1..=slice.len {
            let first = slice.k * (u - 1);
            reductions.push((first..z.max(first)).collect());
        }
        pruned_start += remaining;
    }
    Ok(PrunedSystem { scheme: scheme.clone(), z, levels, reductions })
}

impl PrunedSystem {
    pub fn scheme(&self) -> &AggregationScheme {
        &self.scheme
    }

    pub fn z(&self) -> usize {
        self.z
    }

    /// `m_z = sum_k (M_k - floor(z/k))`.
    pub fn m_z(&self) -> usize {
        self.levels.iter().map(|l| l.remaining).sum()
    }

    /// Number of unobserved bottom steps, `m - z`.
    pub fn bottom_count(&self) -> usize {
        self.scheme.m() - self.z
    }

    pub fn levels(&self) -> &[PrunedLevel] {
        &self.levels
    }

    /// Sparse rows of `R_z`: observed bottom positions per pruned node.
    pub fn reduction_rows(&self) -> &[Vec<usize>] {
        &self.reductions
    }

    /// Full-vector indices of the nodes kept by `P_z` (last entries of each
    /// level block).
    pub fn kept_indices(&self) -> Vec<usize> {
        self.levels.iter().flat_map(|l| l.full_start + l.observed..l.full_start + l.observed + l.remaining).collect()
    }

    /// Full-vector indices of the nodes kept by the covariance selector
    /// `P̌_z` (first entries of each level block, i.e. the shortest
    /// horizons).
    pub fn selector_indices(&self) -> Vec<usize> {
        self.levels.iter().flat_map(|l| l.full_start..l.full_start + l.remaining).collect()
    }

    fn selection_matrix(&self, idx: &[usize]) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(idx.len(), self.scheme.node_count());
        for (r, &c) in idx.iter().enumerate() {
            p[(r, c)] = 1.0;
        }
        p
    }

    /// `P_z = diag_k [0 | I_{M_k - floor(z/k)}]`.
    pub fn pruning_matrix(&self) -> DMatrix<f64> {
        self.selection_matrix(&self.kept_indices())
    }

    /// `P̌_z = diag_k [I_{M_k - floor(z/k)} | 0]`.
    pub fn covariance_selector(&self) -> DMatrix<f64> {
        self.selection_matrix(&self.selector_indices())
    }

    /// Dense `R_z` (`m_z x m_0`), acting on the stacked observed vector.
    pub fn reduction_matrix(&self) -> DMatrix<f64> {
        let bottom_start = self.scheme.node_count() - self.scheme.m();
        let mut r = DMatrix::zeros(self.m_z(), self.scheme.node_count());
        for (row, cols) in self.reductions.iter().enumerate() {
            for &w in cols {
                r[(row, bottom_start + w)] = 1.0;
            }
        }
        r
    }

    /// Summing matrix of the pruned hierarchy, built directly: node `(k, u)`
    /// sums the unobserved bottom steps inside its window.
    pub fn summing_matrix(&self) -> DMatrix<f64> {
        let z = self.z;
        let mut s = DMatrix::zeros(self.m_z(), self.bottom_count());
        let mut row = 0;
        for l in &self.levels {
            for u in l.observed + 1..=l.observed + l.remaining {
                for pos in (l.k * (u - 1)).max(z)..l.k * u {
                    s[(row, pos - z)] = 1.0;
                }
                row += 1;
            }
        }
        s
    }

    /// `S_z = P_z S [0_{z x (m-z)}; I_{m-z}]`.
    pub fn summing_matrix_via_projection(&self) -> DMatrix<f64> {
        let s = build_summing_matrix(&self.scheme).into_matrix();
        let m = self.scheme.m();
        let mut tail = DMatrix::zeros(m, m - self.z);
        for j in 0..m - self.z {
            tail[(self.z + j, j)] = 1.0;
        }
        self.pruning_matrix() * s * tail
    }

    fn check_inputs(&self, observed: &ObservedPeriod) -> Result<()> {
        if observed.scheme() != &self.scheme {
            return Err(Error::Consistency("observed data use a different scheme".into()));
        }
        if observed.z() < self.z {
            return Err(Error::MissingData { needed: self.z, got: observed.z() });
        }
        Ok(())
    }
}

/// Reduced base forecasts `P_z y_hat_{i|z} - R_z y_i` of length `m_z`.
pub fn reduce(forecasts: &HierarchyVector, observed: &ObservedPeriod, system: &PrunedSystem) -> Result<Vec<f64>> {
    system.check_inputs(observed)?;
    if forecasts.scheme() != system.scheme() {
        return Err(Error::Consistency("forecasts use a different scheme".into()));
    }
    let values = forecasts.values();
    let bottom = observed.bottom();
    Ok(system
        .kept_indices()
        .into_iter()
        .zip(&system.reductions)
        .map(|(idx, cols)| values[idx] - cols.iter().map(|&w| bottom[w]).sum::<f64>())
        .collect())
}

/// Level-by-level reduction for nested (tree) schemes.
///
/// Node `(k_q, u)` subtracts, for every finer level `k_p`, the observed
/// level-`k_p` nodes inside its window that are not already covered by
/// observed nodes of level `k_{p+1}`. Must agree with [`reduce`].
pub fn reduce_nested(forecasts: &HierarchyVector, observed: &ObservedPeriod, system: &PrunedSystem) -> Result<Vec<f64>> {
    let scheme = system.scheme();
    if !scheme.is_tree() {
        return Err(Error::UnsupportedTree(scheme.levels().to_vec()));
    }
    system.check_inputs(observed)?;
    if forecasts.scheme() != scheme {
        return Err(Error::Consistency("forecasts use a different scheme".into()));
    }
    let z = system.z();
    // Levels ordered bottom first: k_1 = 1, k_2, ..., k_p = m.
    let ks: Vec<usize> = scheme.levels().iter().rev().copied().collect();
    let observed_levels: Vec<Vec<f64>> = ks.iter().map(|&k| observed.level(k)).collect::<Result<_>>()?;

    let values = forecasts.values();
    let mut out = Vec::with_capacity(system.m_z());
    for l in system.levels() {
        let q = ks.iter().position(|&k| k == l.k).expect("level in scheme");
        for u in l.observed + 1..=l.observed + l.remaining {
            let mut subtract = 0.0;
            for p in 0..q {
                let (kp, kp1) = (ks[p], ks[p + 1]);
                // First level-k_p index (1-based) not covered by observed
                // level-k_{p+1} nodes and inside the window of (k_q, u).
                let covered = (kp1 * (z / kp1)).max(l.k * (u - 1));
                let first = covered / kp + 1;
                let last = z / kp;
                if first <= last {
                    subtract += observed_levels[p][first - 1..last].iter().sum::<f64>();
                }
            }
            out.push(values[l.full_start + u - 1] - subtract);
        }
    }
    Ok(out)
}

/// Maps reconciled pruned forecasts back onto the full hierarchy: observed
/// slots take the observed values, the rest add back the observed sums
/// removed by [`reduce`].
pub fn restore(reconciled_reduced: &[f64], observed: &ObservedPeriod, system: &PrunedSystem) -> Result<HierarchyVector> {
    system.check_inputs(observed)?;
    if reconciled_reduced.len() != system.m_z() {
        return Err(Error::DimensionMismatch { expected: system.m_z(), got: reconciled_reduced.len() });
    }
    let mut values = observed.zero_filled();
    let bottom = observed.bottom();
    for ((idx, cols), &r) in system.kept_indices().into_iter().zip(&system.reductions).zip(reconciled_reduced) {
        values[idx] = r + cols.iter().map(|&w| bottom[w]).sum::<f64>();
    }
    HierarchyVector::new(system.scheme().clone(), values, observed.period())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn scheme(ks: &[usize]) -> AggregationScheme {
        AggregationScheme::new(ks.to_vec()).unwrap()
    }

    fn observed(s: &AggregationScheme, bottom: &[f64]) -> ObservedPeriod {
        ObservedPeriod::new(s.clone(), bottom.to_vec(), 1).unwrap()
    }

    #[test]
    fn quarterly_annual_z2() {
        let s = scheme(&[4, 1]);
        let sys = build_pruned_system(&s, 2).unwrap();
        assert_eq!(sys.m_z(), 3);
        assert_eq!(sys.summing_matrix(), DMatrix::from_row_slice(3, 2, &[1., 1., 1., 0., 0., 1.]));
        assert_eq!(sys.reduction_rows()[0], vec![0, 1]);
        assert!(sys.reduction_rows()[1..].iter().all(Vec::is_empty));
    }

    #[test]
    fn monthly_z7_counts() {
        let s = scheme(&[12, 3, 1]);
        let sys = build_pruned_system(&s, 7).unwrap();
        let observed: Vec<usize> = sys.levels().iter().map(|l| l.observed).collect();
        assert_eq!(observed, vec![0, 2, 7]);
        assert_eq!(sys.m_z(), 8);
    }

    #[test]
    fn z_zero_is_identity() {
        for ks in [&[4, 1][..], &[12, 3, 1], &[12, 6, 4, 3, 2, 1]] {
            let s = scheme(ks);
            let sys = build_pruned_system(&s, 0).unwrap();
            let n = s.node_count();
            assert_eq!(sys.pruning_matrix(), DMatrix::identity(n, n));
            assert_eq!(sys.covariance_selector(), DMatrix::identity(n, n));
            assert_eq!(sys.reduction_matrix(), DMatrix::zeros(n, n));
            assert_eq!(sys.summing_matrix(), build_summing_matrix(&s).into_matrix());
            let x = HierarchyVector::new(s.clone(), (0..n).map(|v| v as f64).collect(), 1).unwrap();
            let obs = observed(&s, &[]);
            let red = reduce(&x, &obs, &sys).unwrap();
            assert_eq!(red, x.values());
            assert_eq!(restore(&red, &obs, &sys).unwrap(), x);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let s = scheme(&[4, 1]);
        assert_eq!(build_pruned_system(&s, 4), Err(Error::OutOfRange { z: 4, m: 4 }));
    }

    #[test]
    fn missing_observations() {
        let s = scheme(&[4, 1]);
        let sys = build_pruned_system(&s, 2).unwrap();
        let x = HierarchyVector::from_bottom(&s, &[1., 2., 3., 4.], 1).unwrap();
        assert_eq!(reduce(&x, &observed(&s, &[1.0]), &sys), Err(Error::MissingData { needed: 2, got: 1 }));
    }

    #[test]
    fn reduction_coefficient_counts() {
        for ks in [&[4, 1][..], &[12, 3, 1], &[4, 2, 1], &[12, 6, 4, 3, 2, 1]] {
            let s = scheme(ks);
            for z in 0..s.m() {
                let sys = build_pruned_system(&s, z).unwrap();
                let mut row = 0;
                for l in sys.levels() {
                    for u in l.observed + 1..=l.observed + l.remaining {
                        let expected = z.saturating_sub(l.k * (u - 1));
                        assert_eq!(sys.reduction_rows()[row].len(), expected);
                        row += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn half_year_example() {
        // {4,2,1}, z=2: annual minus the first half-year, second half-year
        // and Q3, Q4 kept as they are.
        let s = scheme(&[4, 2, 1]);
        let sys = build_pruned_system(&s, 2).unwrap();
        let f = HierarchyVector::new(s.clone(), vec![100., 45., 55., 21., 22., 27., 28.], 1).unwrap();
        let obs = observed(&s, &[20., 26.]);
        let expected = vec![100. - 46., 55., 27., 28.];
        assert_eq!(reduce(&f, &obs, &sys).unwrap(), expected);
        assert_eq!(reduce_nested(&f, &obs, &sys).unwrap(), expected);
    }

    #[test]
    fn nested_rejects_non_tree() {
        let s = scheme(&[12, 6, 4, 3, 2, 1]);
        let sys = build_pruned_system(&s, 5).unwrap();
        let f = HierarchyVector::from_bottom(&s, &[1.0; 12], 1).unwrap();
        let obs = observed(&s, &[1.0; 5]);
        assert!(matches!(reduce_nested(&f, &obs, &sys), Err(Error::UnsupportedTree(_))));
        assert!(reduce(&f, &obs, &sys).is_ok());
    }

    #[test]
    fn restore_inverts_reduce_on_two_level() {
        let s = scheme(&[4, 1]);
        let sys = build_pruned_system(&s, 2).unwrap();
        let obs = observed(&s, &[1.5, 2.5]);
        let (r, q3, q4) = (7.0, 3.0, 4.0);
        let full = restore(&[r, q3, q4], &obs, &sys).unwrap();
        assert_eq!(full.values(), &[r + 1.5 + 2.5, 1.5, 2.5, q3, q4]);
    }

    #[test]
    fn pruning_difference_is_rank_deficient() {
        for ks in [&[4, 1][..], &[12, 3, 1], &[4, 2, 1]] {
            let s = scheme(ks);
            for z in 1..s.m() {
                let sys = build_pruned_system(&s, z).unwrap();
                let diff = sys.pruning_matrix() - sys.covariance_selector();
                let rank = diff.rank(1e-9);
                assert!(rank < sys.m_z(), "{ks:?} z={z}");
            }
        }
    }
}
