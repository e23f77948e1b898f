//! Temporal aggregation and index bookkeeping.
//!
//! A temporal hierarchy is described by a set of aggregation factors
//! `K = {m, ..., 1}`, all divisors of the bottom-level frequency `m`.
//! Level `k` has `M_k = m / k` nodes per top-level period. One period of the
//! hierarchy is stored as a flat vector with the top level first and, within
//! each level, nodes in temporal order:
//!
//! ```text
//! y_i = (y_i^[m], y^[k2]_{M(i-1)+1}, ..., y^[1]_{m(i-1)+1}, ..., y^[1]_{mi})
//! ```
//!
//! Documentation uses the 1-based indices of the usual notation
//! (`u = 1..=M_k` within a period); the storage is 0-based and addressed
//! through [`AggregationScheme::level_offsets`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-level time series keyed by aggregation factor `k`.
pub type LevelSeries = BTreeMap<usize, Vec<f64>>;

/// The ordered factor set `K = {m, k_{p-1}, ..., 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct AggregationScheme {
    ks: Vec<usize>,
}

/// Location of one level inside a stacked hierarchy vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSlice {
    pub k: usize,
    pub start: usize,
    pub len: usize,
}

impl AggregationScheme {
    /// Validates and builds a scheme. Factors must be strictly decreasing,
    /// start at `m`, end at 1 and divide `m`.
    pub fn new(ks: Vec<usize>) -> Result<Self> {
        if ks.len() < 2 {
            return Err(Error::InvalidScheme(format!("need at least two levels, got {ks:?}")));
        }
        let m = ks[0];
        if *ks.last().unwrap() != 1 {
            return Err(Error::InvalidScheme(format!("{ks:?} must end with the bottom level 1")));
        }
        if ks.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidScheme(format!("{ks:?} must be strictly decreasing")));
        }
        if let Some(bad) = ks.iter().find(|&&k| k == 0 || !m.is_multiple_of(k)) {
            return Err(Error::InvalidScheme(format!("{bad} does not divide m={m}")));
        }
        Ok(Self { ks })
    }

    /// Bottom-level observations per top-level period.
    pub fn m(&self) -> usize {
        self.ks[0]
    }

    /// Factors, top level first.
    pub fn levels(&self) -> &[usize] {
        &self.ks
    }

    pub fn contains(&self, k: usize) -> bool {
        self.ks.contains(&k)
    }

    /// `M_k = m / k`.
    pub fn frequency(&self, k: usize) -> Result<usize> {
        if !self.contains(k) {
            return Err(Error::InvalidLevel { k });
        }
        Ok(self.m() / k)
    }

    /// `m_0 = sum_k m / k`.
    pub fn node_count(&self) -> usize {
        self.ks.iter().map(|k| self.m() / k).sum()
    }

    pub fn level_offsets(&self) -> Vec<LevelSlice> {
        let mut start = 0;
        self.ks
            .iter()
            .map(|&k| {
                let len = self.m() / k;
                let slice = LevelSlice { k, start, len };
                start += len;
                slice
            })
            .collect()
    }

    pub fn level_slice(&self, k: usize) -> Result<LevelSlice> {
        self.level_offsets().into_iter().find(|s| s.k == k).ok_or(Error::InvalidLevel { k })
    }

    /// Whether every level nests inside the next coarser one, i.e. the
    /// hierarchy is a single tree. `{12,6,4,3,2,1}` is not: a 4-month node
    /// straddles two half-years.
    pub fn is_tree(&self) -> bool {
        self.ks.windows(2).all(|w| w[0] % w[1] == 0)
    }

    /// Number of new observations at level `k` after `z` bottom steps.
    pub fn observed_count(&self, k: usize, z: usize) -> usize {
        z / k
    }
}

impl fmt::Display for AggregationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.ks.iter().map(|k| k.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for AggregationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let ks = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| Error::InvalidScheme(format!("cannot parse {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ks)
    }
}

impl TryFrom<Vec<usize>> for AggregationScheme {
    type Error = Error;

    fn try_from(ks: Vec<usize>) -> Result<Self> {
        Self::new(ks)
    }
}

impl From<AggregationScheme> for Vec<usize> {
    fn from(s: AggregationScheme) -> Self {
        s.ks
    }
}

/// Non-overlapping `k`-sums of a bottom-level series.
///
/// Aggregation starts at `t* = T - floor(T/m) m + 1` (1-based), so any
/// leading observations that do not complete a top-level period are
/// discarded. Returns `floor(T/m) * M_k` sums.
pub fn aggregate_series(bottom: &[f64], scheme: &AggregationScheme, k: usize) -> Result<Vec<f64>> {
    if !scheme.contains(k) {
        return Err(Error::InvalidLevel { k });
    }
    let m = scheme.m();
    let t = bottom.len();
    if t < m {
        return Err(Error::InsufficientData { needed: m, got: t });
    }
    let start = t % m;
    Ok(bottom[start..].chunks_exact(k).map(|c| c.iter().sum()).collect())
}

/// Aggregates a bottom series to every level of the scheme.
pub fn aggregate_all(bottom: &[f64], scheme: &AggregationScheme) -> Result<LevelSeries> {
    scheme.levels().iter().map(|&k| aggregate_series(bottom, scheme, k).map(|s| (k, s))).collect()
}

/// The `m_0 x m` binary summing matrix with `y_i = S y_i^[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummingMatrix {
    scheme: AggregationScheme,
    entries: DMatrix<f64>,
}

impl SummingMatrix {
    pub fn scheme(&self) -> &AggregationScheme {
        &self.scheme
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.entries
    }
}

/// Stacks the blocks `I_{M_k} ⊗ 1_k'`, top level first.
pub fn build_summing_matrix(scheme: &AggregationScheme) -> SummingMatrix {
    let m = scheme.m();
    let mut entries = DMatrix::zeros(scheme.node_count(), m);
    for slice in scheme.level_offsets() {
        for u in 0..slice.len {
            for j in 0..slice.k {
                entries[(slice.start + u, u * slice.k + j)] = 1.0;
            }
        }
    }
    SummingMatrix { scheme: scheme.clone(), entries }
}

/// One top-level period of stacked values across all levels.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyVector {
    scheme: AggregationScheme,
    values: Vec<f64>,
    period: usize,
}

impl HierarchyVector {
    pub fn new(scheme: AggregationScheme, values: Vec<f64>, period: usize) -> Result<Self> {
        let n = scheme.node_count();
        if values.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: values.len() });
        }
        Ok(Self { scheme, values, period })
    }

    /// Builds the coherent vector `S b` from bottom-level values.
    pub fn from_bottom(scheme: &AggregationScheme, bottom: &[f64], period: usize) -> Result<Self> {
        let m = scheme.m();
        if bottom.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: bottom.len() });
        }
        let values = scheme.levels().iter().flat_map(|&k| bottom.chunks_exact(k).map(|c| c.iter().sum::<f64>())).collect();
        Self::new(scheme.clone(), values, period)
    }

    pub fn scheme(&self) -> &AggregationScheme {
        &self.scheme
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// 1-based top-level period index `i`.
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn level(&self, k: usize) -> Result<&[f64]> {
        let s = self.scheme.level_slice(k)?;
        Ok(&self.values[s.start..s.start + s.len])
    }

    /// Entry `(k, u)` with `u` 1-based within the period.
    pub fn get(&self, k: usize, u: usize) -> Result<f64> {
        let level = self.level(k)?;
        if u == 0 || u > level.len() {
            return Err(Error::DimensionMismatch { expected: level.len(), got: u });
        }
        Ok(level[u - 1])
    }

    pub fn bottom(&self) -> &[f64] {
        &self.values[self.values.len() - self.scheme.m()..]
    }

    /// Largest relative deviation between each node and the sum of its
    /// bottom-level descendants.
    pub fn coherence_error(&self) -> f64 {
        let bottom = self.bottom();
        let scale = bottom.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        let mut worst = 0.0_f64;
        for slice in self.scheme.level_offsets() {
            for (u, chunk) in bottom.chunks_exact(slice.k).enumerate() {
                let dev = (self.values[slice.start + u] - chunk.iter().sum::<f64>()).abs();
                worst = worst.max(dev / scale);
            }
        }
        worst
    }
}

/// Stacks period `i` (1-based) of per-level series into one vector using the
/// common index `y^[k]_{M_k(i-1)+u}`, `u = 1..=M_k`.
pub fn stack_period(series: &LevelSeries, scheme: &AggregationScheme, i: usize) -> Result<HierarchyVector> {
    if i == 0 {
        return Err(Error::InvalidParameter("period index is 1-based".into()));
    }
    let mut values = Vec::with_capacity(scheme.node_count());
    for &k in scheme.levels() {
        let mk = scheme.m() / k;
        let needed = mk * i;
        let level = series.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        if level.len() < needed {
            return Err(Error::IncompletePeriod { k, period: i, needed, got: level.len() });
        }
        values.extend_from_slice(&level[mk * (i - 1)..needed]);
    }
    HierarchyVector::new(scheme.clone(), values, i)
}

/// The partially observed current period: the first `z` bottom-level
/// values. Higher-level observations are always derived from these, so a
/// level `k` holds exactly `floor(z/k)` observed aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPeriod {
    scheme: AggregationScheme,
    bottom: Vec<f64>,
    period: usize,
}

impl ObservedPeriod {
    pub fn new(scheme: AggregationScheme, bottom: Vec<f64>, period: usize) -> Result<Self> {
        if bottom.len() >= scheme.m() {
            return Err(Error::OutOfRange { z: bottom.len(), m: scheme.m() });
        }
        if bottom.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed values"));
        }
        Ok(Self { scheme, bottom, period })
    }

    pub fn scheme(&self) -> &AggregationScheme {
        &self.scheme
    }

    /// Number of observed bottom-level steps.
    pub fn z(&self) -> usize {
        self.bottom.len()
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn bottom(&self) -> &[f64] {
        &self.bottom
    }

    /// The `floor(z/k)` observed aggregates of level `k`.
    pub fn level(&self, k: usize) -> Result<Vec<f64>> {
        if !self.scheme.contains(k) {
            return Err(Error::InvalidLevel { k });
        }
        Ok(self.bottom.chunks_exact(k).map(|c| c.iter().sum()).collect())
    }

    /// Stacked `m_0` vector with observed slots filled and zeros elsewhere.
    pub fn zero_filled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.scheme.node_count()];
        for slice in self.scheme.level_offsets() {
            for (u, chunk) in self.bottom.chunks_exact(slice.k).enumerate() {
                out[slice.start + u] = chunk.iter().sum();
            }
        }
        out
    }
}
