use std::path::Path;
use std::time::Instant;

use clap::Args;
use hfupdate::reconciliation::ReconMethod;
use hfupdate::sim::{run_simulation, FitMode, SimConfig, SimResult, TrainingMode, LARGE_M};
use hfupdate::AggregationScheme;
use serde_json::json;

use crate::{fmt_f64, CliError, CliResult, CommonArgs};

/// Default repetitions for schemes above `LARGE_M`.
pub const LARGE_DEFAULT_REPS: usize = 10;

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Aggregation factors, top first, e.g. `12,3,1`.
    #[arg(long, default_value = "4,1")]
    pub scheme: AggregationScheme,
    /// AR order of the bottom-level model.
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    /// MA order of the bottom-level model.
    #[arg(long, default_value_t = 0)]
    pub q: usize,
    /// Repetitions [default: 50, or 10 for large schemes].
    #[arg(long)]
    pub reps: Option<usize>,
    /// Number of top-level periods.
    #[arg(long, default_value_t = 100)]
    pub n_top: usize,
    /// Innovation variance of the bottom-level model.
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    /// `aicc` or `correct_orders`.
    #[arg(long, default_value = "aicc")]
    pub fit_mode: FitMode,
    #[arg(long, value_delimiter = ',', default_value = "bottom_up,mint_full,mint_shrink")]
    pub methods: Vec<ReconMethod>,
    #[arg(long, default_value_t = 100)]
    pub burn_in: usize,
    /// Folds of the shrinkage cross-validation.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Training sweep over the `last` training period or `all` of them.
    #[arg(long, default_value = "last")]
    pub training: TrainingMode,
    /// Fall back to a pseudo-inverse for singular covariances.
    #[arg(long)]
    pub pinv_fallback: bool,
    /// Allow schemes with a base frequency above 100.
    #[arg(long)]
    pub allow_large: bool,
    /// Worker threads [default: all cores].
    #[arg(long)]
    pub threads: Option<usize>,
}

impl SimulateArgs {
    pub fn to_config(&self) -> CliResult<SimConfig> {
        let large = self.scheme.m() > LARGE_M;
        if large && !self.allow_large {
            return Err(CliError::Usage(format!(
                "scheme {} has m = {}, which takes a long time to simulate; rerun with --allow-large (default reps drop to {LARGE_DEFAULT_REPS})",
                self.scheme,
                self.scheme.m()
            )));
        }
        let config = SimConfig {
            p_bot: self.p,
            q_bot: self.q,
            scheme: self.scheme.clone(),
            n_top: self.n_top,
            sigma2: self.sigma2,
            reps: self.reps.unwrap_or(if large { LARGE_DEFAULT_REPS } else { 50 }),
            fit_mode: self.fit_mode,
            methods: self.methods.clone(),
            seed: self.common.seed,
            burn_in: self.burn_in,
            folds: self.folds,
            training: self.training,
            pseudo_inverse_fallback: self.pinv_fallback,
            allow_large: self.allow_large,
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }
}

pub fn run(args: &SimulateArgs) -> CliResult<()> {
    let config = args.to_config()?;
    let out = args.common.out_dir()?;
    let start = Instant::now();
    let result = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?
            .install(|| run_simulation(&config))?,
        None => run_simulation(&config)?,
    };
    let wall = start.elapsed().as_secs_f64();
    write_results(&out.join("results.csv"), &result)?;
    write_meta(&out.join("meta.json"), &result, wall, args.threads)?;
    let failures = result.failures().count();
    eprintln!(
        "simulate: {} reps ({} skipped), {} failed runs, {:.1}s -> {}",
        result.reps.len(),
        result.failed_reps(),
        failures,
        wall,
        out.display()
    );
    Ok(())
}

pub fn write_results(path: &Path, result: &SimResult) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rep", "method", "z", "level", "train_rrmse", "test_rrmse", "flag"])?;
    for row in result.rows() {
        w.write_record([
            row.rep.to_string(),
            row.method.clone(),
            row.z.to_string(),
            row.level.to_string(),
            fmt_f64(row.train),
            fmt_f64(row.test),
            row.flag.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_meta(path: &Path, result: &SimResult, wall_seconds: f64, threads: Option<usize>) -> CliResult<()> {
    let reps: Vec<_> = result
        .reps
        .iter()
        .map(|r| {
            json!({
                "rep": r.rep,
                "dgp_ar": r.dgp_ar,
                "dgp_ma": r.dgp_ma,
                "fitted_orders": r.fitted_orders.iter().map(|(k, (p, q))| json!({"level": k, "p": p, "q": q})).collect::<Vec<_>>(),
                "shrink_lambda": r.shrink_lambda,
                "covariance_rank": r.covariance_rank,
                "covariance_samples": r.covariance_samples,
                "error": r.error,
                "failed_runs": r.failures.len(),
            })
        })
        .collect();
    let meta = json!({
        "command": "simulate",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": result.config.seed,
        "config": result.config,
        "threads": threads,
        "wall_seconds": wall_seconds,
        "failures": {
            "skipped_reps": result.failed_reps(),
            "failed_runs": result.failures().count(),
            "runs": result.failures().collect::<Vec<_>>(),
        },
        "reps": reps,
    });
    std::fs::write(path, serde_json::to_string_pretty(&meta).expect("serialisable") + "\n")?;
    Ok(())
}
