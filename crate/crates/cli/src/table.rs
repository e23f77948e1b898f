//! Long-format CSV tables of level series.
//!
//! A series table has columns `series_id, level, index, value` with
//! 1-based indices contiguous per `(series_id, level)`.

use std::collections::BTreeMap;
use std::path::Path;

use hfupdate::hierarchy::aggregate_series;
use hfupdate::{AggregationScheme, LevelSeries};
use serde::{Deserialize, Serialize};

use crate::{fmt_f64, CliError, CliResult};

/// Relative tolerance for supplied upper levels against bottom aggregates.
pub const COHERENCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeriesRecord {
    series_id: String,
    level: usize,
    index: usize,
    value: f64,
}

/// Level series keyed by series id.
pub type SeriesTable = BTreeMap<String, LevelSeries>;

/// Reads a series table without any scheme checks beyond index
/// contiguity and finiteness.
pub fn read_series_table(path: &Path) -> CliResult<SeriesTable> {
    let mut grouped: BTreeMap<String, BTreeMap<usize, Vec<(usize, f64)>>> = BTreeMap::new();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    for rec in reader.deserialize() {
        let rec: SeriesRecord = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if !rec.value.is_finite() {
            return Err(CliError::Data(format!(
                "{}: non-finite value for series {:?}, level {}, index {}",
                path.display(),
                rec.series_id,
                rec.level,
                rec.index
            )));
        }
        grouped.entry(rec.series_id).or_default().entry(rec.level).or_default().push((rec.index, rec.value));
    }
    let mut table = SeriesTable::new();
    for (id, levels) in grouped {
        let mut series = LevelSeries::new();
        for (k, mut entries) in levels {
            entries.sort_by_key(|&(i, _)| i);
            for (pos, &(i, _)) in entries.iter().enumerate() {
                if i != pos + 1 {
                    return Err(CliError::Data(format!(
                        "{}: series {id:?}, level {k}: indices must run 1..n without gaps or repeats (found {i} at position {})",
                        path.display(),
                        pos + 1
                    )));
                }
            }
            series.insert(k, entries.into_iter().map(|(_, v)| v).collect());
        }
        table.insert(id, series);
    }
    Ok(table)
}

pub fn write_series_table(path: &Path, table: &SeriesTable) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "level", "index", "value"])?;
    for (id, levels) in table {
        for (k, values) in levels {
            for (i, v) in values.iter().enumerate() {
                w.write_record([id.clone(), k.to_string(), (i + 1).to_string(), fmt_f64(*v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Completes one series for `scheme`: the bottom level is required, upper
/// levels are derived by aggregation or, when supplied, checked against it.
/// `whole_periods` additionally requires the bottom to cover whole periods.
pub fn complete_levels(id: &str, series: &LevelSeries, scheme: &AggregationScheme, whole_periods: bool) -> CliResult<LevelSeries> {
    let bottom = series.get(&1).ok_or_else(|| CliError::Data(format!("series {id:?} has no bottom-level (level 1) data")))?;
    if let Some(k) = series.keys().find(|k| !scheme.contains(**k)) {
        return Err(CliError::Data(format!("series {id:?}: level {k} is not part of scheme {scheme}")));
    }
    let m = scheme.m();
    if whole_periods && bottom.len() % m != 0 {
        return Err(CliError::Data(format!("series {id:?}: {} bottom values are not a whole number of periods of {m}", bottom.len())));
    }
    if bottom.len() < m {
        return Err(CliError::Data(format!("series {id:?}: fewer than {m} bottom values")));
    }
    let mut out = LevelSeries::new();
    for &k in scheme.levels() {
        let derived = if k == 1 {
            bottom.clone()
        } else {
            aggregate_series(bottom, scheme, k).map_err(|e| CliError::Data(format!("series {id:?}: {e}")))?
        };
        if let Some(given) = series.get(&k) {
            if given.len() != derived.len() {
                return Err(CliError::Data(format!(
                    "series {id:?}, level {k}: {} values supplied, bottom data implies {}",
                    given.len(),
                    derived.len()
                )));
            }
            for (j, (g, d)) in given.iter().zip(&derived).enumerate() {
                if (g - d).abs() > COHERENCE_TOL * d.abs().max(1.0) {
                    return Err(CliError::Data(format!(
                        "series {id:?}, level {k}, index {}: value {g} does not match the bottom-level sum {d}",
                        j + 1
                    )));
                }
            }
        }
        out.insert(k, derived);
    }
    Ok(out)
}
