use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use hfupdate::base_models::{first_forecastable_period, fit_level_models, stacked_errors, OrderSelection, Transform};
use hfupdate::reconciliation::{estimate_base_error_covariance, select_shrinkage, ReconMethod};
use hfupdate::updating::{hierarchical_forecast_update, ReconSetup, UpdateRun};
use hfupdate::{AggregationScheme, HierarchyVector, LevelSeries};
use rayon::prelude::*;
use serde::Deserialize;

use crate::table::{complete_levels, read_series_table};
use crate::{fmt_f64, CliError, CliResult, CommonArgs};

#[derive(Debug, Clone, Args)]
pub struct UpdateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Aggregation factors, top first, e.g. `28,7,1`.
    #[arg(long)]
    pub scheme: Option<AggregationScheme>,
    /// History as long CSV: series_id, level, index, value.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// New bottom-level observations of the next period: series_id, index, value.
    #[arg(long)]
    pub new_obs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "bottom_up,mint_full,mint_shrink")]
    pub methods: Vec<ReconMethod>,
    /// `all` (0 up to the observed count) or a list such as `0,3,6`.
    #[arg(long, default_value = "all")]
    pub z: String,
    /// `none` or `log1p`.
    #[arg(long, default_value = "none")]
    pub transform: Transform,
    #[arg(long, default_value_t = 3)]
    pub max_p: usize,
    #[arg(long, default_value_t = 3)]
    pub max_q: usize,
    /// Re-estimate model parameters on the extended history at every z.
    #[arg(long)]
    pub refit: bool,
    /// Fixed shrinkage intensity instead of cross-validation.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Fall back to a pseudo-inverse for singular covariances.
    #[arg(long)]
    pub pinv_fallback: bool,
}

#[derive(Debug, Deserialize)]
struct NewObsRecord {
    series_id: String,
    index: usize,
    value: f64,
}

fn read_new_obs(path: &Path) -> CliResult<BTreeMap<String, Vec<f64>>> {
    let mut grouped: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for rec in reader.deserialize() {
        let rec: NewObsRecord = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if !rec.value.is_finite() {
            return Err(CliError::Data(format!("{}: non-finite new observation for {:?}", path.display(), rec.series_id)));
        }
        grouped.entry(rec.series_id).or_default().push((rec.index, rec.value));
    }
    grouped
        .into_iter()
        .map(|(id, mut v)| {
            v.sort_by_key(|&(i, _)| i);
            if v.iter().enumerate().any(|(p, &(i, _))| i != p + 1) {
                return Err(CliError::Data(format!("{}: series {id:?}: indices must run 1..z", path.display())));
            }
            Ok((id, v.into_iter().map(|(_, x)| x).collect()))
        })
        .collect()
}

fn parse_z(selection: &str, observed: usize, m: usize) -> CliResult<Vec<usize>> {
    let zs: Vec<usize> = if selection.trim() == "all" {
        (0..=observed.min(m - 1)).collect()
    } else {
        selection
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("--z: cannot parse {s:?}"))))
            .collect::<CliResult<_>>()?
    };
    if let Some(&z) = zs.iter().find(|&&z| z >= m) {
        return Err(CliError::Usage(format!("--z: {z} is not below m = {m}")));
    }
    if let Some(&z) = zs.iter().find(|&&z| z > observed) {
        return Err(CliError::Data(format!("z = {z} requested but only {observed} new observations supplied")));
    }
    Ok(zs)
}

/// Updated forecasts of one series: per z, the updated base forecasts and
/// one run per method.
struct SeriesOutput {
    id: String,
    cells: Vec<(usize, HierarchyVector, Vec<UpdateRun>)>,
}

fn update_series(args: &UpdateArgs, scheme: &AggregationScheme, id: &str, raw: &LevelSeries, new_obs: &[f64]) -> CliResult<SeriesOutput> {
    let with_id = |e: CliError| match e {
        CliError::Data(m) => CliError::Data(format!("series {id:?}: {m}")),
        CliError::Numerical(m) => CliError::Numerical(format!("series {id:?}: {m}")),
        other => other,
    };
    let levels = complete_levels(id, raw, scheme, true)?;
    let m = scheme.m();
    if new_obs.len() >= m {
        return Err(CliError::Data(format!("series {id:?}: {} new observations, a partial period has fewer than {m}", new_obs.len())));
    }
    let zs = parse_z(&args.z, new_obs.len(), m)?;
    let selection = OrderSelection::Aicc { max_p: args.max_p, max_q: args.max_q };
    let models = fit_level_models(&levels, scheme, &selection, args.transform).map_err(|e| with_id(e.into()))?;

    let mut setups = Vec::new();
    if args.methods.iter().any(|&x| x != ReconMethod::BottomUp) {
        let periods = levels[&1].len() / m;
        let first = first_forecastable_period(&models, scheme);
        if first > periods {
            return Err(CliError::Data(format!("series {id:?}: too little history to estimate forecast errors")));
        }
        let errors = stacked_errors(&models, &levels, scheme, first..=periods).map_err(|e| with_id(e.into()))?;
        let w0 = estimate_base_error_covariance(&errors).map_err(|e| with_id(e.into()))?;
        for &method in &args.methods {
            let setup = match method {
                ReconMethod::BottomUp => ReconSetup::bottom_up(),
                ReconMethod::MintFull => ReconSetup::mint_full(w0.clone()),
                ReconMethod::MintShrink => {
                    let lambda = args.lambda.unwrap_or_else(|| select_shrinkage(&errors, args.folds).lambda);
                    ReconSetup::mint_shrink(&w0, lambda).map_err(|e| CliError::Usage(e.to_string()))?
                }
            };
            setups.push(setup.with_pseudo_inverse_fallback(args.pinv_fallback));
        }
    } else {
        setups = args.methods.iter().map(|_| ReconSetup::bottom_up()).collect();
    }

    let mut cells = Vec::new();
    for z in zs {
        let runs = setups
            .iter()
            .map(|s| hierarchical_forecast_update(&models, &levels, &new_obs[..z], scheme, s, args.refit))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| {
                let err = with_id(e.into());
                match err {
                    CliError::Numerical(msg) => CliError::Numerical(format!("{msg} at z = {z}; try --pinv-fallback or another method")),
                    other => other,
                }
            })?;
        let base = runs[0].base_updated.clone();
        cells.push((z, base, runs));
    }
    Ok(SeriesOutput { id: id.to_string(), cells })
}

pub fn run(args: &UpdateArgs) -> CliResult<()> {
    let scheme = args.scheme.clone().ok_or_else(|| CliError::Usage("--scheme is required".into()))?;
    let data = args.data.as_ref().ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let new_path = args.new_obs.as_ref().ok_or_else(|| CliError::Usage("--new-obs is required".into()))?;
    if args.methods.is_empty() {
        return Err(CliError::Usage("--methods must not be empty".into()));
    }
    let table = read_series_table(data)?;
    let new_obs = read_new_obs(new_path)?;
    if let Some(id) = new_obs.keys().find(|id| !table.contains_key(*id)) {
        return Err(CliError::Data(format!("new observations for unknown series {id:?}")));
    }
    let out = args.common.out_dir()?;

    let outputs: Vec<SeriesOutput> = table
        .par_iter()
        .map(|(id, raw)| {
            let obs = new_obs.get(id).map_or(&[][..], Vec::as_slice);
            update_series(args, &scheme, id, raw, obs)
        })
        .collect::<CliResult<_>>()?;

    let mut w = csv::Writer::from_path(out.join("forecasts.csv"))?;
    w.write_record(["series_id", "level", "slot", "kind", "value", "method", "z"])?;
    for s in &outputs {
        for (z, base, runs) in &s.cells {
            let tagged = std::iter::once(("base".to_string(), base)).chain(runs.iter().map(|r| (r.method.to_string(), &r.restored)));
            for (method, v) in tagged {
                for &k in scheme.levels() {
                    let seen = z / k;
                    for (slot, value) in v.level(k)?.iter().enumerate() {
                        let kind = if slot < seen { "observed" } else { "forecast" };
                        w.write_record([
                            s.id.clone(),
                            k.to_string(),
                            (slot + 1).to_string(),
                            kind.to_string(),
                            fmt_f64(*value),
                            method.clone(),
                            z.to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    eprintln!("update: {} series -> {}", outputs.len(), out.join("forecasts.csv").display());
    Ok(())
}
