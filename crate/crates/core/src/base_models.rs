//! Per-level base models and (updated) base forecasts.
//!
//! Every level of the hierarchy gets its own independently fitted ARMA
//! model. Base forecasts for period `i` at level `k` are the `M_k` forecasts
//! from origin `M_k(i-1)`; after `z` new bottom steps the origin moves to
//! `M_k(i-1) + floor(z/k)` and the first `floor(z/k)` slots hold the
//! observations themselves.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arma::{fit_arma, select_order_aicc, ArmaModel};
use crate::error::{Error, Result};
use crate::hierarchy::{AggregationScheme, HierarchyVector, LevelSeries};

/// Value transform applied before modelling and inverted on forecasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    None,
    /// `x -> ln(1 + x)`.
    Log1p,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Log1p => x.ln_1p(),
        }
    }

    pub fn invert(self, x: f64) -> f64 {
        match self {
            Transform::None => x,
            Transform::Log1p => x.exp_m1(),
        }
    }

    fn apply_all(self, xs: &[f64]) -> Result<Vec<f64>> {
        let out: Vec<f64> = xs.iter().map(|&x| self.apply(x)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transformed series"));
        }
        Ok(out)
    }
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Transform::None),
            "log1p" => Ok(Transform::Log1p),
            other => Err(Error::InvalidParameter(format!("unknown transform {other:?}"))),
        }
    }
}

/// How the per-level orders are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OrderSelection {
    /// AICc search over `p <= max_p`, `q <= max_q`.
    Aicc { max_p: usize, max_q: usize },
    /// Fixed orders per level.
    Orders(BTreeMap<usize, (usize, usize)>),
}

/// One fitted model per aggregation level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelModels {
    models: BTreeMap<usize, ArmaModel>,
    transform: Transform,
}

impl LevelModels {
    pub fn new(models: BTreeMap<usize, ArmaModel>, transform: Transform) -> Self {
        Self { models, transform }
    }

    pub fn get(&self, k: usize) -> Result<&ArmaModel> {
        self.models.get(&k).ok_or(Error::InvalidLevel { k })
    }

    pub fn models(&self) -> &BTreeMap<usize, ArmaModel> {
        &self.models
    }

    pub fn transform(&self) -> Transform {
        self.transform
    }

    /// Orders `(p, q)` per level.
    pub fn orders(&self) -> BTreeMap<usize, (usize, usize)> {
        self.models.iter().map(|(&k, m)| (k, (m.p(), m.q()))).collect()
    }

    /// Forecasts `h` steps of level `k` after `history` (original scale).
    pub fn forecast_level(&self, k: usize, history: &[f64], h: usize) -> Result<Vec<f64>> {
        let model = self.get(k)?;
        let hist = self.transform.apply_all(history)?;
        let f = model.filter(&hist).forecast(hist.len(), h)?;
        Ok(f.into_iter().map(|v| self.transform.invert(v)).collect())
    }
}

/// Fits one model per level. Each level is modelled independently; no
/// level reads another level's data or parameters.
pub fn fit_level_models(
    series: &LevelSeries,
    scheme: &AggregationScheme,
    selection: &OrderSelection,
    transform: Transform,
) -> Result<LevelModels> {
    let mut models = BTreeMap::new();
    for &k in scheme.levels() {
        let data = series.get(&k).ok_or(Error::InvalidLevel { k })?;
        let data = transform.apply_all(data)?;
        let model = match selection {
            OrderSelection::Aicc { max_p, max_q } => select_order_aicc(&data, *max_p, *max_q)?,
            OrderSelection::Orders(orders) => {
                let &(p, q) = orders.get(&k).ok_or(Error::InvalidLevel { k })?;
                fit_arma(&data, p, q)?
            }
        };
        models.insert(k, model.with_level(k));
    }
    Ok(LevelModels::new(models, transform))
}

/// Number of complete periods in the level histories, checked for
/// consistency with `z` new bottom steps: level `k` must hold exactly
/// `M_k * periods + floor(z/k)` values.
pub fn completed_periods(histories: &LevelSeries, scheme: &AggregationScheme, z: usize) -> Result<usize> {
    let m = scheme.m();
    let bottom = histories.get(&1).ok_or(Error::InvalidLevel { k: 1 })?;
    if bottom.len() < z {
        return Err(Error::Consistency(format!("bottom history has {} values, fewer than z={z}", bottom.len())));
    }
    let complete = bottom.len() - z;
    if !complete.is_multiple_of(m) {
        return Err(Error::Consistency(format!("bottom history of {} values is not whole periods plus z={z}", bottom.len())));
    }
    let periods = complete / m;
    for &k in scheme.levels() {
        let got = histories.get(&k).map_or(0, Vec::len);
        let expected = (m / k) * periods + z / k;
        if got != expected {
            return Err(Error::Consistency(format!("level {k} has {got} values, expected {expected} for {periods} periods and z={z}")));
        }
    }
    Ok(periods)
}

/// Updated base forecasts `y_hat_{i|z}`.
///
/// `histories` hold all data through period `i-1` plus the `floor(z/k)` new
/// observations of each level. Per level, the first `floor(z/k)` slots are
/// the observations and the rest are forecasts from the extended history.
/// With `refit`, each level's model is re-estimated (same orders) on the
/// extended history first; otherwise parameters are reused.
pub fn update_forecasts(
    models: &LevelModels,
    histories: &LevelSeries,
    scheme: &AggregationScheme,
    i: usize,
    z: usize,
    refit: bool,
) -> Result<HierarchyVector> {
    if z >= scheme.m() {
        return Err(Error::OutOfRange { z, m: scheme.m() });
    }
    let periods = completed_periods(histories, scheme, z)?;
    if periods + 1 != i {
        return Err(Error::Consistency(format!("histories cover {periods} complete periods, cannot forecast period {i}")));
    }
    let mut values = Vec::with_capacity(scheme.node_count());
    for &k in scheme.levels() {
        let mk = scheme.m() / k;
        let seen = z / k;
        let history = &histories[&k];
        values.extend_from_slice(&history[history.len() - seen..]);
        let forecasts = if refit {
            let model = models.get(k)?;
            let data = models.transform.apply_all(history)?;
            let refitted = fit_arma(&data, model.p(), model.q())?;
            LevelModels::new(BTreeMap::from([(k, refitted)]), models.transform).forecast_level(k, history, mk - seen)?
        } else {
            models.forecast_level(k, history, mk - seen)?
        };
        values.extend(forecasts);
    }
    HierarchyVector::new(scheme.clone(), values, i)
}

/// Base forecasts `y_hat_{i|i-1}` for every period `i` in `periods`
/// (1-based), stacked one period per row. Each level is filtered once and
/// forecasts are produced from every period origin.
pub fn rolling_base_forecasts(
    models: &LevelModels,
    series: &LevelSeries,
    scheme: &AggregationScheme,
    periods: std::ops::RangeInclusive<usize>,
) -> Result<Vec<HierarchyVector>> {
    let mut per_level: Vec<Vec<Vec<f64>>> = Vec::new();
    for &k in scheme.levels() {
        let mk = scheme.m() / k;
        let model = models.get(k)?;
        let data = series.get(&k).ok_or(Error::InvalidLevel { k })?;
        let transformed = models.transform.apply_all(data)?;
        let filtered = model.filter(&transformed);
        let mut rows = Vec::new();
        for i in periods.clone() {
            if i == 0 || mk * (i - 1) > transformed.len() {
                return Err(Error::IncompletePeriod { k, period: i, needed: mk * (i.max(1) - 1), got: transformed.len() });
            }
            let f = filtered.forecast(mk * (i - 1), mk)?;
            rows.push(f.into_iter().map(|v| models.transform.invert(v)).collect());
        }
        per_level.push(rows);
    }
    periods
        .clone()
        .enumerate()
        .map(|(r, i)| {
            let values = per_level.iter().flat_map(|lvl| lvl[r].iter().copied()).collect();
            HierarchyVector::new(scheme.clone(), values, i)
        })
        .collect()
}

/// In-sample one-top-level-step-ahead stacked base forecast errors, one row
/// per period in `periods`. This is the default input for the base error
/// covariance; any other `rows x m_0` error matrix can be used instead.
pub fn stacked_errors(
    models: &LevelModels,
    series: &LevelSeries,
    scheme: &AggregationScheme,
    periods: std::ops::RangeInclusive<usize>,
) -> Result<DMatrix<f64>> {
    let forecasts = rolling_base_forecasts(models, series, scheme, periods.clone())?;
    let n = scheme.node_count();
    let mut errors = DMatrix::zeros(forecasts.len(), n);
    for (r, (f, i)) in forecasts.iter().zip(periods).enumerate() {
        let actual = crate::hierarchy::stack_period(series, scheme, i)?;
        for c in 0..n {
            errors[(r, c)] = actual.values()[c] - f.values()[c];
        }
    }
    Ok(errors)
}

/// First period whose origin leaves every level enough history for its
/// model, never earlier than period 2.
pub fn first_forecastable_period(models: &LevelModels, scheme: &AggregationScheme) -> usize {
    let mut i = 2;
    loop {
        let ok = scheme.levels().iter().all(|&k| {
            let need = models.get(k).map_or(0, |m| m.p().max(m.q()));
            (scheme.m() / k) * (i - 1) >= need
        });
        if ok {
            return i;
        }
        i += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::aggregate_all;

    fn scheme(ks: &[usize]) -> AggregationScheme {
        AggregationScheme::new(ks.to_vec()).unwrap()
    }

    fn ar1_models(s: &AggregationScheme, phi: f64) -> LevelModels {
        let models = s.levels().iter().map(|&k| (k, ArmaModel::new(vec![phi], vec![], 0.5 * k as f64, 1.0).unwrap())).collect();
        LevelModels::new(models, Transform::None)
    }

    fn histories(s: &AggregationScheme, bottom: &[f64], z: usize) -> LevelSeries {
        let m = s.m();
        let complete = &bottom[..bottom.len() - z];
        let mut h = aggregate_all(complete, s).unwrap();
        let new = &bottom[bottom.len() - z..];
        for (&k, v) in h.iter_mut() {
            v.extend(new.chunks_exact(k).map(|c| c.iter().sum::<f64>()));
        }
        assert_eq!(h[&m].len(), complete.len() / m);
        h
    }

    #[test]
    fn z0_equals_plain_forecasts() {
        let s = scheme(&[4, 2, 1]);
        let models = ar1_models(&s, 0.6);
        let bottom: Vec<f64> = (0..40).map(|t| ((t * 13) % 7) as f64).collect();
        let h = histories(&s, &bottom, 0);
        let up = update_forecasts(&models, &h, &s, 11, 0, false).unwrap();
        let mut plain = Vec::new();
        for &k in s.levels() {
            plain.extend(crate::arma::forecast(models.get(k).unwrap(), &h[&k], 4 / k).unwrap());
        }
        assert_eq!(up.values(), plain.as_slice());
    }

    #[test]
    fn layout_after_two_quarters() {
        let s = scheme(&[4, 2, 1]);
        let models = ar1_models(&s, 0.6);
        let mut bottom: Vec<f64> = (0..40).map(|t| (t % 5) as f64).collect();
        bottom.extend([3.0, 4.0]);
        let h = histories(&s, &bottom, 2);
        let up = update_forecasts(&models, &h, &s, 11, 2, false).unwrap();
        let plain = update_forecasts(&models, &histories(&s, &bottom[..40], 0), &s, 11, 0, false).unwrap();
        // annual untouched
        assert_eq!(up.level(4).unwrap(), plain.level(4).unwrap());
        // first half-year observed, second updated from the new origin
        assert_eq!(up.get(2, 1).unwrap(), 7.0);
        assert_eq!(up.get(2, 2).unwrap(), crate::arma::forecast(models.get(2).unwrap(), &h[&2], 1).unwrap()[0]);
        assert_eq!(&up.level(1).unwrap()[..2], &[3.0, 4.0]);
    }

    #[test]
    fn ar1_single_step_update() {
        let s = scheme(&[4, 1]);
        let models = ar1_models(&s, 0.8);
        let mut bottom: Vec<f64> = (0..20).map(|t| (t % 3) as f64).collect();
        bottom.push(2.5);
        let h = histories(&s, &bottom, 1);
        let up = update_forecasts(&models, &h, &s, 6, 1, false).unwrap();
        let mu = 0.5;
        assert!((up.get(1, 2).unwrap() - (mu + 0.8 * (2.5 - mu))).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_z_rejected() {
        let s = scheme(&[4, 2, 1]);
        let models = ar1_models(&s, 0.5);
        let bottom: Vec<f64> = (0..42).map(f64::from).collect();
        let mut h = histories(&s, &bottom, 2);
        h.get_mut(&2).unwrap().pop();
        assert!(matches!(update_forecasts(&models, &h, &s, 11, 2, false), Err(Error::Consistency(_))));
    }

    #[test]
    fn rolling_forecasts_match_update() {
        let s = scheme(&[4, 1]);
        let models = ar1_models(&s, 0.3);
        let bottom: Vec<f64> = (0..40).map(|t| ((t * 5) % 9) as f64).collect();
        let full = aggregate_all(&bottom, &s).unwrap();
        let rolled = rolling_base_forecasts(&models, &full, &s, 3..=10).unwrap();
        for f in rolled {
            let i = f.period();
            let h = histories(&s, &bottom[..4 * (i - 1)], 0);
            assert_eq!(f, update_forecasts(&models, &h, &s, i, 0, false).unwrap());
        }
    }

    #[test]
    fn log1p_transform_roundtrip() {
        let s = scheme(&[2, 1]);
        let models =
            LevelModels::new(s.levels().iter().map(|&k| (k, ArmaModel::white_noise(1.0, 1.0).unwrap())).collect(), Transform::Log1p);
        let f = models.forecast_level(1, &[1.0, 2.0], 2).unwrap();
        assert!((f[0] - 1f64.exp_m1()).abs() < 1e-12);
        assert_eq!("log1p".parse::<Transform>().unwrap(), Transform::Log1p);
    }
}
