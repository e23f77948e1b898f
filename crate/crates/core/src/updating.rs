//! End-to-end forecast updating within a period.
//!
//! After `z` bottom-level observations of period `i`: update the base
//! forecasts of every level, prune the observed nodes and reduce their
//! ancestors, reconcile the pruned hierarchy, then restore the observed
//! values. With `z = 0` this is ordinary temporal reconciliation.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::base_models::{completed_periods, update_forecasts, LevelModels};
use crate::error::{Error, Result, UpdateStep};
use crate::hierarchy::{AggregationScheme, HierarchyVector, LevelSeries, ObservedPeriod};
use crate::pruning::{build_pruned_system, reduce, restore, PrunedSystem};
use crate::reconciliation::{mapping_matrix, prune_covariance, reconcile, CovarianceEstimate, ReconMethod, ReconWeights};

/// Reconciliation method plus the full-hierarchy covariance `W0` it uses.
#[derive(Debug, Clone)]
pub struct ReconSetup {
    pub method: ReconMethod,
    /// Base error covariance at `z = 0`; pruned per `z`. Unused by
    /// bottom-up.
    pub covariance: Option<CovarianceEstimate>,
    pub pseudo_inverse_fallback: bool,
}

impl ReconSetup {
    pub fn bottom_up() -> Self {
        Self { method: ReconMethod::BottomUp, covariance: None, pseudo_inverse_fallback: false }
    }

    pub fn mint_full(w0: CovarianceEstimate) -> Self {
        Self { method: ReconMethod::MintFull, covariance: Some(w0), pseudo_inverse_fallback: false }
    }

    /// MinT with `(1 - lambda) W0 + lambda diag(W0)`.
    pub fn mint_shrink(w0: &CovarianceEstimate, lambda: f64) -> Result<Self> {
        Ok(Self { method: ReconMethod::MintShrink, covariance: Some(w0.shrink(lambda)?), pseudo_inverse_fallback: false })
    }

    pub fn with_pseudo_inverse_fallback(mut self, on: bool) -> Self {
        self.pseudo_inverse_fallback = on;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunDiagnostics {
    pub elapsed: Duration,
    /// Rank of the pruned covariance, for minT runs.
    pub covariance_rank: Option<usize>,
    pub used_pseudo_inverse: bool,
}

/// All intermediate and final vectors of one update.
#[derive(Debug, Clone)]
pub struct UpdateRun {
    pub z: usize,
    pub method: ReconMethod,
    pub base_updated: HierarchyVector,
    pub reduced: Vec<f64>,
    pub reconciled_reduced: Vec<f64>,
    pub restored: HierarchyVector,
    pub weights: ReconWeights,
    pub system: PrunedSystem,
    pub diagnostics: RunDiagnostics,
}

impl UpdateRun {
    pub fn scheme(&self) -> &AggregationScheme {
        self.restored.scheme()
    }
}

/// Appends the level aggregates of `new_bottom` to histories holding whole
/// periods only. Returns the extended histories and the period index being
/// updated.
fn extend_histories(histories: &LevelSeries, new_bottom: &[f64], scheme: &AggregationScheme) -> Result<(LevelSeries, usize)> {
    let periods = completed_periods(histories, scheme, 0)?;
    let mut extended = histories.clone();
    for &k in scheme.levels() {
        let sums = new_bottom.chunks_exact(k).map(|c| c.iter().sum::<f64>());
        extended.get_mut(&k).expect("checked by completed_periods").extend(sums);
    }
    Ok((extended, periods + 1))
}

/// Steps 2-4 given updated base forecasts.
fn reconcile_updated(
    base_updated: &HierarchyVector,
    observed: &ObservedPeriod,
    system: &PrunedSystem,
    setup: &ReconSetup,
) -> Result<UpdateRun> {
    let start = Instant::now();
    let reduced = reduce(base_updated, observed, system).map_err(Error::in_step(UpdateStep::Reduce))?;

    let (weights, covariance_rank) = (|| {
        let wz = match (setup.method, &setup.covariance) {
            (ReconMethod::BottomUp, _) | (_, None) => None,
            (_, Some(w0)) => Some(prune_covariance(w0, system)?),
        };
        let s_z = system.summing_matrix();
        let weights = mapping_matrix(setup.method, &s_z, wz.as_ref(), setup.pseudo_inverse_fallback)?;
        Ok((weights, wz.map(|w| w.rank())))
    })()
    .map_err(Error::in_step(UpdateStep::Reconcile))?;
    let reconciled_reduced = reconcile(&weights, &reduced).map_err(Error::in_step(UpdateStep::Reconcile))?;

    let restored = restore(&reconciled_reduced, observed, system).map_err(Error::in_step(UpdateStep::Restore))?;
    Ok(UpdateRun {
        z: system.z(),
        method: setup.method,
        base_updated: base_updated.clone(),
        reduced,
        reconciled_reduced,
        restored,
        diagnostics: RunDiagnostics { elapsed: start.elapsed(), covariance_rank, used_pseudo_inverse: weights.used_pseudo_inverse() },
        weights,
        system: system.clone(),
    })
}

/// Updates the forecasts of the period following `histories` after the
/// first `new_bottom.len()` bottom-level observations of that period.
///
/// `histories` hold whole periods for every level. Upper-level observations
/// are derived by aggregating `new_bottom`, never taken separately.
pub fn hierarchical_forecast_update(
    models: &LevelModels,
    histories: &LevelSeries,
    new_bottom: &[f64],
    scheme: &AggregationScheme,
    setup: &ReconSetup,
    refit: bool,
) -> Result<UpdateRun> {
    let z = new_bottom.len();
    let (base_updated, observed, system) = prepare(models, histories, new_bottom, scheme, refit)?;
    debug_assert_eq!(system.z(), z);
    reconcile_updated(&base_updated, &observed, &system, setup)
}

fn prepare(
    models: &LevelModels,
    histories: &LevelSeries,
    new_bottom: &[f64],
    scheme: &AggregationScheme,
    refit: bool,
) -> Result<(HierarchyVector, ObservedPeriod, PrunedSystem)> {
    let z = new_bottom.len();
    if z >= scheme.m() {
        return Err(Error::OutOfRange { z, m: scheme.m() });
    }
    let (extended, i) = extend_histories(histories, new_bottom, scheme).map_err(Error::in_step(UpdateStep::UpdateBase))?;
    let base = update_forecasts(models, &extended, scheme, i, z, refit).map_err(Error::in_step(UpdateStep::UpdateBase))?;
    let observed = ObservedPeriod::new(scheme.clone(), new_bottom.to_vec(), i).map_err(Error::in_step(UpdateStep::Reduce))?;
    let system = build_pruned_system(scheme, z).map_err(Error::in_step(UpdateStep::Reduce))?;
    Ok((base, observed, system))
}

/// One `(z, method)` cell of a sweep. Failures stay local to their cell.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub z: usize,
    pub method: ReconMethod,
    /// Updated base forecasts for this `z`, kept even when reconciliation fails.
    pub base_updated: Option<HierarchyVector>,
    pub result: Result<UpdateRun>,
}

/// Runs the update for every `z` in `0..m` on a fully observed period,
/// feeding the first `z` bottom values, for every setup. Base forecasts are
/// updated once per `z` and shared by all methods. Output is ordered by `z`
/// then by setup.
pub fn run_z_sweep(
    models: &LevelModels,
    histories: &LevelSeries,
    full_period: &[f64],
    scheme: &AggregationScheme,
    setups: &[ReconSetup],
    refit: bool,
) -> Result<Vec<SweepRun>> {
    let m = scheme.m();
    if full_period.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: full_period.len() });
    }
    let per_z: Vec<Vec<SweepRun>> = (0..m)
        .into_par_iter()
        .map(|z| match prepare(models, histories, &full_period[..z], scheme, refit) {
            Ok((base, observed, system)) => setups
                .iter()
                .map(|setup| SweepRun {
                    z,
                    method: setup.method,
                    base_updated: Some(base.clone()),
                    result: reconcile_updated(&base, &observed, &system, setup),
                })
                .collect(),
            Err(e) => setups.iter().map(|setup| SweepRun { z, method: setup.method, base_updated: None, result: Err(e.clone()) }).collect(),
        })
        .collect();
    Ok(per_z.into_iter().flatten().collect())
}
