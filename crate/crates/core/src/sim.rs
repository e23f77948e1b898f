//! Monte Carlo study of forecast updating on simulated temporal hierarchies.
//!
//! Each repetition draws a random stationary ARMA model for the bottom
//! level, simulates and aggregates it, fits one model per level on all but
//! the last top-level period, estimates the base error covariance from
//! in-sample rolling errors and sweeps `z` over a training period and the
//! held-out period.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arma::{pacf_to_coefficients, ArmaModel};
use crate::base_models::{first_forecastable_period, fit_level_models, stacked_errors, LevelModels, OrderSelection, Transform};
use crate::error::{Error, Result};
use crate::evaluation::{error_report, stack_fair, RrmseFlag};
use crate::hierarchy::{aggregate_all, stack_period, AggregationScheme, HierarchyVector, LevelSeries};
use crate::pruning::build_pruned_system;
use crate::reconciliation::{estimate_base_error_covariance, select_shrinkage, ReconMethod};
use crate::updating::{run_z_sweep, ReconSetup};

/// Bound on the partial autocorrelations of random models.
pub const PACF_BOUND: f64 = 0.95;
/// Schemes with a larger base frequency need an explicit opt-in.
pub const LARGE_M: usize = 100;
/// Method tag of the updated base forecasts in results.
pub const BASE_TAG: &str = "base";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// AICc search up to `(3, 3)` per level.
    Aicc,
    /// The orders implied by temporal aggregation of the true model.
    CorrectOrders,
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aicc" => Ok(FitMode::Aicc),
            "correct_orders" => Ok(FitMode::CorrectOrders),
            other => Err(Error::InvalidParameter(format!("unknown fit mode {other:?}"))),
        }
    }
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitMode::Aicc => "aicc",
            FitMode::CorrectOrders => "correct_orders",
        })
    }
}

/// Which training periods the training-error sweep covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Only the final training period, mirroring the held-out evaluation.
    LastPeriod,
    /// Every training period with enough history, errors pooled.
    AllPeriods,
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" | "last_period" => Ok(TrainingMode::LastPeriod),
            "all" | "all_periods" => Ok(TrainingMode::AllPeriods),
            other => Err(Error::InvalidParameter(format!("unknown training mode {other:?}"))),
        }
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::LastPeriod => "last_period",
            TrainingMode::AllPeriods => "all_periods",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p_bot: usize,
    pub q_bot: usize,
    pub scheme: AggregationScheme,
    pub n_top: usize,
    pub sigma2: f64,
    pub reps: usize,
    pub fit_mode: FitMode,
    pub methods: Vec<ReconMethod>,
    pub seed: u64,
    pub burn_in: usize,
    /// Folds of the shrinkage cross-validation.
    pub folds: usize,
    pub training: TrainingMode,
    pub pseudo_inverse_fallback: bool,
    /// Opt-in for schemes with `m > LARGE_M`.
    pub allow_large: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p_bot: 1,
            q_bot: 0,
            scheme: AggregationScheme::new(vec![4, 1]).expect("valid scheme"),
            n_top: 100,
            sigma2: 1.0,
            reps: 50,
            fit_mode: FitMode::Aicc,
            methods: ReconMethod::ALL.to_vec(),
            seed: 0,
            burn_in: 100,
            folds: 5,
            training: TrainingMode::LastPeriod,
            pseudo_inverse_fallback: false,
            allow_large: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.p_bot > 2 || self.q_bot > 2 {
            return bad(format!("orders ({}, {}) outside the grid 0..=2", self.p_bot, self.q_bot));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.n_top < 20 {
            return bad(format!("n_top = {} is below 20", self.n_top));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 = {} must be positive", self.sigma2));
        }
        if self.methods.is_empty() {
            return bad("at least one reconciliation method is required".into());
        }
        if self.folds < 2 {
            return bad("shrinkage cross-validation needs at least 2 folds".into());
        }
        if self.scheme.m() > LARGE_M && !self.allow_large {
            return bad(format!(
                "scheme {} has m = {} > {LARGE_M}; this run is slow, pass allow_large to proceed",
                self.scheme,
                self.scheme.m()
            ));
        }
        Ok(())
    }
}

/// Random stationary and invertible ARMA(p, q) with zero mean and unit
/// innovation variance. Both polynomials come from partial
/// autocorrelations drawn uniformly on `(-0.95, 0.95)`.
pub fn draw_stationary_arma<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> ArmaModel {
    let mut draw = |n: usize| -> Vec<f64> {
        let pacf: Vec<f64> = (0..n).map(|_| rng.random_range(-PACF_BOUND..PACF_BOUND)).collect();
        pacf_to_coefficients(&pacf)
    };
    let ar = draw(p);
    // 1 + theta B = 1 - phi B for a stationary phi polynomial.
    let ma: Vec<f64> = draw(q).into_iter().map(|c| -c).collect();
    ArmaModel::new(ar, ma, 0.0, 1.0).expect("partial autocorrelations inside (-1, 1)")
}

/// Simulates `n_top` periods of the bottom level after `burn_in` discarded
/// steps and aggregates them to every level.
pub fn simulate_hierarchy<R: Rng + ?Sized>(
    model: &ArmaModel,
    scheme: &AggregationScheme,
    n_top: usize,
    burn_in: usize,
    rng: &mut R,
) -> LevelSeries {
    let bottom = model.simulate(n_top * scheme.m(), burn_in, rng);
    aggregate_all(&bottom, scheme).expect("whole periods")
}

/// Orders of the aggregated processes: level `k` keeps the AR order and
/// gets MA order `floor((p (k-1) + (k-1) + q) / k)`.
pub fn correct_orders(scheme: &AggregationScheme, p_bot: usize, q_bot: usize) -> BTreeMap<usize, (usize, usize)> {
    scheme.levels().iter().map(|&k| (k, (p_bot, (p_bot * (k - 1) + (k - 1) + q_bot) / k))).collect()
}

/// One result row: rRMSE of `method` at level `level` after `z` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub rep: usize,
    pub method: String,
    pub z: usize,
    pub level: usize,
    pub train: f64,
    pub test: f64,
    /// Empty, or `|`-separated `train:..`/`test:..` markers such as
    /// `test:failed` or `train:zero_denominator`.
    pub flag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub rep: usize,
    pub sweep: String,
    pub method: String,
    pub z: usize,
    pub numerical: bool,
    pub message: String,
}

/// Everything recorded for one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub rep: usize,
    pub dgp_ar: Vec<f64>,
    pub dgp_ma: Vec<f64>,
    pub fitted_orders: BTreeMap<usize, (usize, usize)>,
    pub shrink_lambda: Option<f64>,
    pub covariance_rank: Option<usize>,
    pub covariance_samples: usize,
    pub rows: Vec<SimRow>,
    pub failures: Vec<RunFailure>,
    /// Set when the whole repetition was skipped.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub reps: Vec<RepOutcome>,
}

impl SimResult {
    pub fn rows(&self) -> impl Iterator<Item = &SimRow> {
        self.reps.iter().flat_map(|r| r.rows.iter())
    }

    pub fn failures(&self) -> impl Iterator<Item = &RunFailure> {
        self.reps.iter().flat_map(|r| r.failures.iter())
    }

    pub fn failed_reps(&self) -> usize {
        self.reps.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Random stream of repetition `rep`: the seed picks the key, the
/// repetition the stream, so reps are independent of scheduling.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Runs all repetitions in parallel on the current rayon pool.
pub fn run_simulation(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let reps = (0..config.reps).into_par_iter().map(|rep| run_rep(config, rep)).collect();
    Ok(SimResult { config: config.clone(), reps })
}

fn truncate(series: &LevelSeries, scheme: &AggregationScheme, periods: usize) -> LevelSeries {
    series.iter().map(|(&k, v)| (k, v[..scheme.m() / k * periods].to_vec())).collect()
}

/// Fair-stacked predictions of one swept period.
struct PeriodEval {
    actual: HierarchyVector,
    base0: HierarchyVector,
    /// `(tag, z)` → fair vector and whether the `z = 0` slots fell back to
    /// the base forecasts.
    cells: BTreeMap<(String, usize), std::result::Result<(HierarchyVector, bool), String>>,
}

#[allow(clippy::too_many_arguments)]
fn sweep_period(
    models: &LevelModels,
    series: &LevelSeries,
    scheme: &AggregationScheme,
    period: usize,
    setups: &[ReconSetup],
    rep: usize,
    sweep: &str,
    failures: &mut Vec<RunFailure>,
) -> Result<PeriodEval> {
    let histories = truncate(series, scheme, period - 1);
    let actual = stack_period(series, scheme, period)?;
    let runs = run_z_sweep(models, &histories, actual.bottom(), scheme, setups, false)?;

    let mut base_by_z: BTreeMap<usize, HierarchyVector> = BTreeMap::new();
    let mut rec0: BTreeMap<ReconMethod, HierarchyVector> = BTreeMap::new();
    for r in &runs {
        if let Some(base) = &r.base_updated {
            base_by_z.entry(r.z).or_insert_with(|| base.clone());
        }
        match &r.result {
            Ok(run) => {
                if r.z == 0 {
                    rec0.insert(r.method, run.restored.clone());
                }
            }
            Err(e) => failures.push(RunFailure {
                rep,
                sweep: sweep.to_string(),
                method: r.method.to_string(),
                z: r.z,
                numerical: e.is_numerical(),
                message: e.to_string(),
            }),
        }
    }
    let base0 = base_by_z.get(&0).cloned().ok_or_else(|| Error::Consistency(format!("no base forecasts for period {period}")))?;

    let mut cells = BTreeMap::new();
    for r in &runs {
        let cell = match &r.result {
            Ok(run) => {
                let zero = rec0.get(&r.method);
                let fair = stack_fair(zero.unwrap_or(&base0), &run.restored, &run.system)?;
                Ok((fair, zero.is_none()))
            }
            Err(e) => Err(e.to_string()),
        };
        cells.insert((r.method.to_string(), r.z), cell);
    }
    for (&z, base) in &base_by_z {
        let system = build_pruned_system(scheme, z)?;
        cells.insert((BASE_TAG.to_string(), z), Ok((stack_fair(&base0, base, &system)?, false)));
    }
    Ok(PeriodEval { actual, base0, cells })
}

/// Per-level rRMSE values of one `(tag, z)` cell pooled over periods, with
/// flag markers.
fn score(evals: &[PeriodEval], tag: &str, z: usize, scheme: &AggregationScheme) -> (Vec<f64>, Vec<&'static str>) {
    let key = (tag.to_string(), z);
    let mut fair = Vec::new();
    let mut fallback = false;
    for e in evals {
        match e.cells.get(&key) {
            Some(Ok((f, fb))) => {
                fair.push(f.clone());
                fallback |= fb;
            }
            _ => return (vec![f64::NAN; scheme.levels().len()], vec!["failed"]),
        }
    }
    let actual: Vec<HierarchyVector> = evals.iter().map(|e| e.actual.clone()).collect();
    let base: Vec<HierarchyVector> = evals.iter().map(|e| e.base0.clone()).collect();
    let report = match error_report(&actual, &fair, &base, z, tag) {
        Ok(r) => r,
        Err(_) => return (vec![f64::NAN; scheme.levels().len()], vec!["failed"]),
    };
    let mut flags = Vec::new();
    if fallback {
        flags.push("z0_fallback");
    }
    if report.levels.iter().any(|(_, r)| r.flag == Some(RrmseFlag::ZeroDenominator)) {
        flags.push("zero_denominator");
    }
    (report.levels.iter().map(|(_, r)| r.value).collect(), flags)
}

fn run_rep(config: &SimConfig, rep: usize) -> RepOutcome {
    let mut rng = rep_rng(config.seed, rep);
    let scheme = &config.scheme;
    let mut dgp = draw_stationary_arma(config.p_bot, config.q_bot, &mut rng);
    if config.sigma2 != 1.0 {
        dgp = ArmaModel::new(dgp.ar().to_vec(), dgp.ma().to_vec(), 0.0, config.sigma2).expect("valid model");
    }
    let series = simulate_hierarchy(&dgp, scheme, config.n_top, config.burn_in, &mut rng);
    let mut outcome = RepOutcome {
        rep,
        dgp_ar: dgp.ar().to_vec(),
        dgp_ma: dgp.ma().to_vec(),
        fitted_orders: BTreeMap::new(),
        shrink_lambda: None,
        covariance_rank: None,
        covariance_samples: 0,
        rows: Vec::new(),
        failures: Vec::new(),
        error: None,
    };
    if let Err(e) = fill_rep(config, &series, &mut outcome) {
        outcome.error = Some(e.to_string());
        outcome.rows.clear();
    }
    outcome
}

fn fill_rep(config: &SimConfig, series: &LevelSeries, out: &mut RepOutcome) -> Result<()> {
    let scheme = &config.scheme;
    let n_train = config.n_top - 1;
    let train = truncate(series, scheme, n_train);
    let selection = match config.fit_mode {
        FitMode::Aicc => OrderSelection::Aicc { max_p: 3, max_q: 3 },
        FitMode::CorrectOrders => OrderSelection::Orders(correct_orders(scheme, config.p_bot, config.q_bot)),
    };
    let models = fit_level_models(&train, scheme, &selection, Transform::None)?;
    out.fitted_orders = models.orders();

    let first = first_forecastable_period(&models, scheme);
    let needs_w = config.methods.iter().any(|&m| m != ReconMethod::BottomUp);
    let mut setups = Vec::new();
    let (w0, lambda) = if needs_w {
        let errors = stacked_errors(&models, &train, scheme, first..=n_train)?;
        out.covariance_samples = errors.nrows();
        let w0 = estimate_base_error_covariance(&errors)?;
        out.covariance_rank = Some(w0.rank());
        let sel = select_shrinkage(&errors, config.folds);
        out.shrink_lambda = Some(sel.lambda);
        (Some(w0), sel.lambda)
    } else {
        (None, 1.0)
    };
    for &method in &config.methods {
        let setup = match method {
            ReconMethod::BottomUp => ReconSetup::bottom_up(),
            ReconMethod::MintFull => ReconSetup::mint_full(w0.clone().expect("estimated above")),
            ReconMethod::MintShrink => ReconSetup::mint_shrink(w0.as_ref().expect("estimated above"), lambda)?,
        };
        setups.push(setup.with_pseudo_inverse_fallback(config.pseudo_inverse_fallback));
    }

    let train_periods: Vec<usize> = match config.training {
        TrainingMode::LastPeriod => vec![n_train],
        TrainingMode::AllPeriods => (first.max(2)..=n_train).collect(),
    };
    let mut failures = Vec::new();
    let train_evals = train_periods
        .iter()
        .map(|&i| sweep_period(&models, &train, scheme, i, &setups, out.rep, "train", &mut failures))
        .collect::<Result<Vec<_>>>()?;
    let test_evals = vec![sweep_period(&models, series, scheme, config.n_top, &setups, out.rep, "test", &mut failures)?];
    out.failures = failures;

    let tags: Vec<String> = std::iter::once(BASE_TAG.to_string()).chain(config.methods.iter().map(|m| m.to_string())).collect();
    for tag in &tags {
        for z in 0..scheme.m() {
            let (train_vals, train_flags) = score(&train_evals, tag, z, scheme);
            let (test_vals, test_flags) = score(&test_evals, tag, z, scheme);
            let flag = train_flags
                .iter()
                .map(|f| format!("train:{f}"))
                .chain(test_flags.iter().map(|f| format!("test:{f}")))
                .collect::<Vec<_>>()
                .join("|");
            for (q, &level) in scheme.levels().iter().enumerate() {
                out.rows.push(SimRow {
                    rep: out.rep,
                    method: tag.clone(),
                    z,
                    level,
                    train: train_vals[q],
                    test: test_vals[q],
                    flag: flag.clone(),
                });
            }
        }
    }
    Ok(())
}
