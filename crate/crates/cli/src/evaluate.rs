use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use hfupdate::evaluation::{error_report, stack_fair, RrmseFlag};
use hfupdate::reconciliation::set_negative_to_zero;
use hfupdate::{build_pruned_system, AggregationScheme, HierarchyVector};
use serde::Deserialize;

use crate::table::{complete_levels, read_series_table};
use crate::{fmt_f64, CliError, CliResult, CommonArgs};

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub scheme: Option<AggregationScheme>,
    /// Predictions in the format written by `update`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Actual values of the evaluated period: series_id, level, index, value.
    #[arg(long)]
    pub actuals: Option<PathBuf>,
    /// Clip negative forecasts to zero (keeping coherence) before scoring.
    #[arg(long)]
    pub nonneg: bool,
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    series_id: String,
    level: usize,
    slot: usize,
    value: f64,
    method: String,
    z: usize,
}

type Key = (String, String, usize);

/// Predictions keyed by `(series_id, method, z)`.
fn read_predictions(path: &Path, scheme: &AggregationScheme) -> CliResult<BTreeMap<Key, HierarchyVector>> {
    let mut grouped: BTreeMap<Key, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for rec in reader.deserialize() {
        let r: PredictionRecord = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cell = grouped.entry((r.series_id, r.method, r.z)).or_default();
        if cell.insert((r.level, r.slot), r.value).is_some() {
            return Err(CliError::Data(format!("{}: duplicate level {} slot {}", path.display(), r.level, r.slot)));
        }
    }
    let mut out = BTreeMap::new();
    for (key, cells) in grouped {
        let mut values = Vec::with_capacity(scheme.node_count());
        for lvl in scheme.level_offsets() {
            for slot in 1..=lvl.len {
                let v = cells.get(&(lvl.k, slot)).ok_or_else(|| {
                    CliError::Data(format!(
                        "predictions for series {:?}, method {}, z = {}: missing level {} slot {slot}",
                        key.0, key.1, key.2, lvl.k
                    ))
                })?;
                values.push(*v);
            }
        }
        if cells.len() != scheme.node_count() {
            return Err(CliError::Data(format!(
                "predictions for series {:?}, method {}, z = {}: entries outside scheme {scheme}",
                key.0, key.1, key.2
            )));
        }
        out.insert(key.clone(), HierarchyVector::new(scheme.clone(), values, 1)?);
    }
    Ok(out)
}

pub fn run(args: &EvaluateArgs) -> CliResult<()> {
    let scheme = args.scheme.clone().ok_or_else(|| CliError::Usage("--scheme is required".into()))?;
    let pred_path = args.predictions.as_ref().ok_or_else(|| CliError::Usage("--predictions is required".into()))?;
    let act_path = args.actuals.as_ref().ok_or_else(|| CliError::Usage("--actuals is required".into()))?;
    let mut predictions = read_predictions(pred_path, &scheme)?;
    let actual_table = read_series_table(act_path)?;
    let out = args.common.out_dir()?;

    let mut actuals = BTreeMap::new();
    for (id, raw) in &actual_table {
        let levels = complete_levels(id, raw, &scheme, true)?;
        if levels[&1].len() != scheme.m() {
            return Err(CliError::Data(format!("actuals for series {id:?} must cover exactly one period")));
        }
        actuals.insert(id.clone(), hfupdate::hierarchy::stack_period(&levels, &scheme, 1)?);
    }

    if args.nonneg {
        for ((_, method, _), v) in predictions.iter_mut() {
            if method != "base" {
                *v = set_negative_to_zero(v);
            }
        }
        let mut w = csv::Writer::from_path(out.join("predictions_nonneg.csv"))?;
        w.write_record(["series_id", "level", "slot", "value", "method", "z"])?;
        for ((id, method, z), v) in &predictions {
            for &k in scheme.levels() {
                for (slot, value) in v.level(k)?.iter().enumerate() {
                    w.write_record([id.clone(), k.to_string(), (slot + 1).to_string(), fmt_f64(*value), method.clone(), z.to_string()])?;
                }
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(out.join("rrmse.csv"))?;
    w.write_record(["series_id", "method", "z", "level", "rrmse", "numerator", "denominator", "flag"])?;
    let mut flagged = 0;
    for ((id, method, z), pred) in &predictions {
        let actual = actuals.get(id).ok_or_else(|| CliError::Data(format!("no actuals for series {id:?}")))?;
        let base0 = predictions
            .get(&(id.clone(), "base".to_string(), 0))
            .ok_or_else(|| CliError::Data(format!("series {id:?}: base forecasts at z = 0 are required as the reference")))?;
        let system = build_pruned_system(&scheme, *z)?;
        let (zero, fallback) = match predictions.get(&(id.clone(), method.clone(), 0)) {
            Some(v) => (v, false),
            None => (base0, true),
        };
        let fair = stack_fair(zero, pred, &system)?;
        let report = error_report(std::slice::from_ref(actual), &[fair], std::slice::from_ref(base0), *z, method)?;
        for (k, r) in &report.levels {
            let mut flags = Vec::new();
            if r.flag == Some(RrmseFlag::ZeroDenominator) {
                flags.push("zero_denominator");
                flagged += 1;
            }
            if fallback {
                flags.push("z0_fallback");
            }
            w.write_record([
                id.clone(),
                method.clone(),
                z.to_string(),
                k.to_string(),
                fmt_f64(r.value),
                fmt_f64(r.numerator),
                fmt_f64(r.denominator),
                flags.join("|"),
            ])?;
        }
        let any_flag = report.levels.iter().any(|(_, r)| r.flag.is_some());
        w.write_record([
            id.clone(),
            method.clone(),
            z.to_string(),
            "overall".to_string(),
            fmt_f64(report.overall),
            String::new(),
            String::new(),
            if any_flag { "zero_denominator".into() } else { String::new() },
        ])?;
    }
    w.flush()?;
    eprintln!("evaluate: {} prediction sets, {flagged} flagged levels -> {}", predictions.len(), out.join("rrmse.csv").display());
    Ok(())
}
