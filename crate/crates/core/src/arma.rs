//! Zero-differencing ARMA(p, q) models.
//!
//! The model is written around its mean `mu`:
//!
//! ```text
//! (y_t - mu) = sum_i phi_i (y_{t-i} - mu) + e_t + sum_j theta_j e_{t-j}
//! ```
//!
//! Pure AR models are fitted by least squares on the lagged, mean-centred
//! design. Models with an MA part minimise the conditional sum of squares
//! (CSS), starting from a Hannan–Rissanen long-AR initialisation. The search
//! runs over partial autocorrelations mapped through `tanh`, so every
//! candidate is stationary and invertible.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::nelder_mead;

/// Radius that offending roots are moved to when a least-squares AR fit
/// lands outside the stationary region.
const PROJECTION_RADIUS: f64 = 1.01;
const RESTARTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    /// Aggregation level the model was fitted on, when known.
    pub level: Option<usize>,
    pub n_obs: usize,
    pub aicc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaModel {
    ar: Vec<f64>,
    ma: Vec<f64>,
    intercept: f64,
    sigma2: f64,
    fitted_on: Option<FitInfo>,
}

impl ArmaModel {
    /// Builds a model, checking `sigma2 > 0`, stationarity and invertibility.
    pub fn new(ar: Vec<f64>, ma: Vec<f64>, intercept: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
        }
        if ar.iter().chain(&ma).any(|c| !c.is_finite()) || !intercept.is_finite() {
            return Err(Error::NonFinite("ARMA coefficients"));
        }
        let model = Self { ar, ma, intercept, sigma2, fitted_on: None };
        if !model.is_stationary() {
            return Err(Error::InvalidParameter(format!("AR part {:?} is not stationary", model.ar)));
        }
        if !model.is_invertible() {
            return Err(Error::InvalidParameter(format!("MA part {:?} is not invertible", model.ma)));
        }
        Ok(model)
    }

    pub fn white_noise(intercept: f64, sigma2: f64) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), intercept, sigma2)
    }

    pub fn p(&self) -> usize {
        self.ar.len()
    }

    pub fn q(&self) -> usize {
        self.ma.len()
    }

    pub fn ar(&self) -> &[f64] {
        &self.ar
    }

    pub fn ma(&self) -> &[f64] {
        &self.ma
    }

    /// Process mean.
    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn fitted_on(&self) -> Option<&FitInfo> {
        self.fitted_on.as_ref()
    }

    pub fn with_level(mut self, level: usize) -> Self {
        if let Some(info) = self.fitted_on.as_mut() {
            info.level = Some(level);
        }
        self
    }

    pub fn is_stationary(&self) -> bool {
        inverse_roots(&self.ar).iter().all(|r| r.norm() < 1.0)
    }

    pub fn is_invertible(&self) -> bool {
        let neg: Vec<f64> = self.ma.iter().map(|t| -t).collect();
        inverse_roots(&neg).iter().all(|r| r.norm() < 1.0)
    }

    /// CSS residuals of a series under this model. Residuals before index
    /// `p` are zero (no complete lag vector).
    pub fn residuals(&self, series: &[f64]) -> Vec<f64> {
        let w: Vec<f64> = series.iter().map(|y| y - self.intercept).collect();
        css_residuals(&self.ar, &self.ma, &w)
    }

    /// Runs the CSS filter once so that forecasts from many origins inside
    /// `series` can be produced without refiltering.
    pub fn filter<'a>(&'a self, series: &'a [f64]) -> Filtered<'a> {
        Filtered { model: self, series, residuals: self.residuals(series) }
    }

    /// Draws `n` values after discarding `burn_in` start-up values.
    pub fn simulate<R: Rng + ?Sized>(&self, n: usize, burn_in: usize, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, self.sigma2.sqrt()).expect("positive variance");
        let total = n + burn_in;
        let (p, q) = (self.p(), self.q());
        let mut w = vec![0.0; total];
        let mut e = vec![0.0; total];
        for t in 0..total {
            e[t] = normal.sample(rng);
            let mut v = e[t];
            for i in 0..p.min(t) {
                v += self.ar[i] * w[t - 1 - i];
            }
            for j in 0..q.min(t) {
                v += self.ma[j] * e[t - 1 - j];
            }
            w[t] = v;
        }
        w[burn_in..].iter().map(|v| v + self.intercept).collect()
    }
}

/// A series filtered through a model; forecasts can start at any origin.
pub struct Filtered<'a> {
    model: &'a ArmaModel,
    series: &'a [f64],
    residuals: Vec<f64>,
}

impl Filtered<'_> {
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// `h` forecasts conditioned on the first `origin` values. Identical to
    /// [`forecast`] on `&series[..origin]` because the CSS filter is causal.
    pub fn forecast(&self, origin: usize, h: usize) -> Result<Vec<f64>> {
        let m = self.model;
        if origin > self.series.len() {
            return Err(Error::DimensionMismatch { expected: self.series.len(), got: origin });
        }
        check_history(m, origin)?;
        let w: Vec<f64> = self.series[origin.saturating_sub(m.p())..origin].iter().map(|y| y - m.intercept).collect();
        let e = &self.residuals[origin.saturating_sub(m.q())..origin];
        Ok(recursion(m, &w, e, h))
    }
}

fn check_history(model: &ArmaModel, len: usize) -> Result<()> {
    if len == 0 && model.p() + model.q() > 0 {
        return Err(Error::EmptyHistory);
    }
    if len < model.p().max(model.q()) {
        return Err(Error::InsufficientData { needed: model.p().max(model.q()), got: len });
    }
    Ok(())
}

/// Point forecasts from tails of centred values and residuals.
fn recursion(model: &ArmaModel, w_tail: &[f64], e_tail: &[f64], h: usize) -> Vec<f64> {
    let (p, q) = (model.p(), model.q());
    let mut w: Vec<f64> = w_tail.to_vec();
    let mut e: Vec<f64> = e_tail.to_vec();
    let mut out = Vec::with_capacity(h);
    for _ in 0..h {
        let mut v = 0.0;
        for i in 0..p.min(w.len()) {
            v += model.ar[i] * w[w.len() - 1 - i];
        }
        for j in 0..q.min(e.len()) {
            v += model.ma[j] * e[e.len() - 1 - j];
        }
        w.push(v);
        e.push(0.0);
        out.push(v + model.intercept);
    }
    out
}

/// `h` recursive point forecasts after `history`. Future innovations are set
/// to zero; past innovations come from CSS filtering of the history.
pub fn forecast(model: &ArmaModel, history: &[f64], h: usize) -> Result<Vec<f64>> {
    model.filter(history).forecast(history.len(), h)
}

fn css_residuals(ar: &[f64], ma: &[f64], w: &[f64]) -> Vec<f64> {
    let (p, q) = (ar.len(), ma.len());
    let mut e = vec![0.0; w.len()];
    for t in p..w.len() {
        let mut v = w[t];
        for i in 0..p {
            v -= ar[i] * w[t - 1 - i];
        }
        for j in 0..q.min(t) {
            v -= ma[j] * e[t - 1 - j];
        }
        e[t] = v;
    }
    e
}

fn css(ar: &[f64], ma: &[f64], w: &[f64]) -> f64 {
    css_residuals(ar, ma, w)[ar.len()..].iter().map(|e| e * e).sum()
}

/// Inverse roots of `1 - c_1 x - ... - c_p x^p`, i.e. the eigenvalues of
/// its companion matrix. The polynomial has all roots outside the unit
/// circle iff every inverse root lies strictly inside it.
pub fn inverse_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let p = coeffs.len();
    match p {
        0 => Vec::new(),
        1 => vec![Complex::new(coeffs[0], 0.0)],
        _ => {
            let mut companion = DMatrix::zeros(p, p);
            for j in 0..p {
                companion[(0, j)] = coeffs[j];
            }
            for i in 1..p {
                companion[(i, i - 1)] = 1.0;
            }
            companion.complex_eigenvalues().iter().copied().collect()
        }
    }
}

/// Rebuilds `c` from inverse roots: `prod_i (1 - l_i x) = 1 - sum_j c_j x^j`.
fn coefficients_from_inverse_roots(roots: &[Complex<f64>]) -> Vec<f64> {
    let mut poly = vec![Complex::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex::new(0.0, 0.0); poly.len() + 1];
        for (j, &c) in poly.iter().enumerate() {
            next[j] += c;
            next[j + 1] -= c * r;
        }
        poly = next;
    }
    poly[1..].iter().map(|c| -c.re).collect()
}

/// Moves inverse roots with modulus `>= 1/radius` onto the circle of
/// modulus `1/radius`, i.e. roots of the polynomial onto `|x| = radius`.
pub fn project_stationary(coeffs: &[f64], radius: f64) -> Vec<f64> {
    let limit = 1.0 / radius;
    let roots = inverse_roots(coeffs);
    if roots.iter().all(|r| r.norm() < 1.0) {
        return coeffs.to_vec();
    }
    let moved: Vec<Complex<f64>> = roots.into_iter().map(|r| if r.norm() >= limit { r * (limit / r.norm()) } else { r }).collect();
    coefficients_from_inverse_roots(&moved)
}

/// Durbin–Levinson map from partial autocorrelations in `(-1, 1)` to AR
/// coefficients of a stationary process.
pub fn pacf_to_coefficients(pacf: &[f64]) -> Vec<f64> {
    let mut phi: Vec<f64> = Vec::with_capacity(pacf.len());
    for (k, &r) in pacf.iter().enumerate() {
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = prev[j] - r * prev[k - 1 - j];
        }
        phi.push(r);
    }
    phi
}

/// Inverse of [`pacf_to_coefficients`] (step-down recursion).
pub fn coefficients_to_pacf(coeffs: &[f64]) -> Vec<f64> {
    let mut phi = coeffs.to_vec();
    let mut pacf = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let r = phi[k];
        pacf[k] = r;
        let denom = 1.0 - r * r;
        let prev = phi.clone();
        for j in 0..k {
            phi[j] = (prev[j] + r * prev[k - 1 - j]) / denom;
        }
        phi.truncate(k);
    }
    pacf
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Least-squares regression without intercept.
fn least_squares(design: &DMatrix<f64>, target: &DVector<f64>) -> Option<DVector<f64>> {
    if design.ncols() == 0 {
        return Some(DVector::zeros(0));
    }
    let xtx = design.transpose() * design;
    let xty = design.transpose() * target;
    xtx.cholesky().map(|c| c.solve(&xty))
}

fn ar_least_squares(w: &[f64], p: usize) -> Option<Vec<f64>> {
    let rows = w.len().checked_sub(p)?;
    let design = DMatrix::from_fn(rows, p, |r, c| w[p + r - 1 - c]);
    let target = DVector::from_iterator(rows, w[p..].iter().copied());
    least_squares(&design, &target).map(|b| b.iter().copied().collect())
}

/// Hannan–Rissanen start values for an ARMA(p, q).
fn hannan_rissanen(w: &[f64], p: usize, q: usize) -> (Vec<f64>, Vec<f64>) {
    let n = w.len();
    let long = ((10.0 * (n as f64).log10()).ceil() as usize).max(p + q + 1).min(n / 4);
    let zeros = (vec![0.0; p], vec![0.0; q]);
    let Some(long_ar) = ar_least_squares(w, long) else {
        return zeros;
    };
    let eps = css_residuals(&long_ar, &[], w);
    let start = long + q;
    if n <= start + p + q {
        return zeros;
    }
    let rows = n - start;
    let design = DMatrix::from_fn(rows, p + q, |r, c| {
        let t = start + r;
        if c < p {
            w[t - 1 - c]
        } else {
            eps[t - 1 - (c - p)]
        }
    });
    let target = DVector::from_iterator(rows, w[start..].iter().copied());
    match least_squares(&design, &target) {
        Some(b) => (b.rows(0, p).iter().copied().collect(), b.rows(p, q).iter().copied().collect()),
        None => zeros,
    }
}

fn to_search_space(coeffs: &[f64], negate: bool) -> Vec<f64> {
    let c: Vec<f64> = coeffs.iter().map(|v| if negate { -v } else { *v }).collect();
    let c = project_stationary(&c, PROJECTION_RADIUS);
    coefficients_to_pacf(&c).into_iter().map(|r| if r.is_finite() { r.clamp(-0.98, 0.98).atanh() } else { 0.0 }).collect()
}

fn from_search_space(u: &[f64], p: usize) -> (Vec<f64>, Vec<f64>) {
    let r: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
    let ar = pacf_to_coefficients(&r[..p]);
    let ma = pacf_to_coefficients(&r[p..]).into_iter().map(|v| -v).collect();
    (ar, ma)
}

fn aicc(n: usize, sigma2: f64, p: usize, q: usize) -> f64 {
    let n = n as f64;
    let k = (p + q + 2) as f64;
    if n - k - 1.0 <= 0.0 {
        return f64::INFINITY;
    }
    n * sigma2.ln() + 2.0 * k * n / (n - k - 1.0)
}

/// Fits an ARMA(p, q) with the mean as intercept.
pub fn fit_arma(series: &[f64], p: usize, q: usize) -> Result<ArmaModel> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("series"));
    }
    let n = series.len();
    let needed = 10 * (p + q + 1);
    if n < needed {
        return Err(Error::SeriesTooShort { p, q, needed, got: n });
    }
    let mu = mean(series);
    let w: Vec<f64> = series.iter().map(|y| y - mu).collect();
    let variance = w.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if variance <= 1e-12 * mu.abs().max(1.0).powi(2) {
        return Err(Error::FitFailure { p, q, reason: "zero-variance series".into() });
    }

    let (ar, ma) = if q == 0 {
        let ar = ar_least_squares(&w, p).ok_or_else(|| Error::FitFailure { p, q, reason: "singular lagged design".into() })?;
        (project_stationary(&ar, PROJECTION_RADIUS), Vec::new())
    } else {
        fit_css(&w, p, q)?
    };

    let n_eff = n - p;
    let sigma2 = css(&ar, &ma, &w) / n_eff as f64;
    if !(sigma2 > 1e-12 * variance) {
        return Err(Error::FitFailure { p, q, reason: format!("degenerate innovation variance {sigma2:e}") });
    }
    let mut model = ArmaModel::new(ar, ma, mu, sigma2).map_err(|e| Error::FitFailure { p, q, reason: e.to_string() })?;
    model.fitted_on = Some(FitInfo { level: None, n_obs: n, aicc: aicc(n_eff, sigma2, p, q) });
    Ok(model)
}

fn fit_css(w: &[f64], p: usize, q: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ar0, ma0) = hannan_rissanen(w, p, q);
    let mut start: Vec<f64> = to_search_space(&ar0, false);
    start.extend(to_search_space(&ma0, true));

    let objective = |u: &[f64]| {
        let (ar, ma) = from_search_space(u, p);
        css(&ar, &ma, w)
    };
    let mut best = nelder_mead(objective, &start, 0.3, 1e-10, 400 * (p + q));
    let mut attempts = 1;
    while !best.converged && attempts <= RESTARTS {
        let next = nelder_mead(objective, &best.x, 0.1, 1e-10, 400 * (p + q));
        if next.value <= best.value {
            best = next;
        }
        attempts += 1;
    }
    if !best.converged {
        return Err(Error::FitFailure {
            p,
            q,
            reason: format!(
                "CSS search did not converge after {attempts} attempts ({} evaluations, css {:e})",
                best.evaluations, best.value
            ),
        });
    }
    Ok(from_search_space(&best.x, p))
}

/// Fits every `(p, q)` with `p <= max_p`, `q <= max_q` and returns the
/// model with the smallest AICc, `n log(s2) + 2kn/(n-k-1)` with `k = p+q+2`.
/// Ties prefer fewer parameters, then smaller `p`.
pub fn select_order_aicc(series: &[f64], max_p: usize, max_q: usize) -> Result<ArmaModel> {
    let mut best: Option<(f64, usize, usize, ArmaModel)> = None;
    for p in 0..=max_p {
        for q in 0..=max_q {
            let Ok(model) = fit_arma(series, p, q) else {
                continue;
            };
            let score = model.fitted_on.as_ref().map_or(f64::INFINITY, |f| f.aicc);
            let better = match &best {
                None => true,
                Some((s, bp, bq, _)) => (score, p + q, p) < (*s, bp + bq, *bp),
            };
            if better {
                best = Some((score, p, q, model));
            }
        }
    }
    best.map(|b| b.3).ok_or(Error::SelectionFailure)
}

/// The ARMA(1,1) followed by non-overlapping `k`-sums of a stationary
/// AR(1), derived by matching autocovariances: the aggregate has AR
/// coefficient `phi^k` and an MA(1) part fitted to the autocovariances of
/// `Y_i - phi^k Y_{i-1}`.
pub fn aggregate_ar1(phi: f64, sigma2: f64, intercept: f64, k: usize) -> Result<ArmaModel> {
    if phi.abs() >= 1.0 {
        return Err(Error::InvalidParameter(format!("|phi| must be < 1, got {phi}")));
    }
    if k == 1 {
        return ArmaModel::new(vec![phi], Vec::new(), intercept, sigma2);
    }
    let gx = |h: i64| sigma2 * phi.powi(h.unsigned_abs() as i32) / (1.0 - phi * phi);
    let kk = k as i64;
    let gy = |h: i64| -> f64 {
        let mut s = 0.0;
        for a in 0..kk {
            for b in 0..kk {
                s += gx(kk * h + a - b);
            }
        }
        s
    };
    let big_phi = phi.powi(k as i32);
    let gu0 = (1.0 + big_phi * big_phi) * gy(0) - 2.0 * big_phi * gy(1);
    let gu1 = (1.0 + big_phi * big_phi) * gy(1) - big_phi * gy(0) - big_phi * gy(2);
    let rho = gu1 / gu0;
    let (theta, s2) = if rho.abs() < 1e-15 {
        (0.0, gu0)
    } else {
        let theta = (1.0 - (1.0 - 4.0 * rho * rho).sqrt()) / (2.0 * rho);
        (theta, gu1 / theta)
    };
    let ar = if big_phi == 0.0 { Vec::new() } else { vec![big_phi] };
    let ma = if theta == 0.0 { Vec::new() } else { vec![theta] };
    ArmaModel::new(ar, ma, intercept * k as f64, s2)
}
