//! Gaussian regression with group-specific slopes and variances and a shared
//! stationary AR(1) error process, fitted by exact (restricted) maximum
//! likelihood.
//!
//! Within group `g` the errors satisfy `Cov(e_s, e_t) = σ²_g φ^|s-t|`. Given
//! φ the coefficients and variances have closed forms (GLS on the
//! Prais-Winsten transformed series), so the likelihood is profiled down to a
//! single parameter `θ = atanh φ` and maximized over a bracket.
//!
//! Plain ML underestimates φ by roughly `(1 + 3φ)/n` once the regression
//! coefficients are estimated; REML removes most of that bias and is the
//! default.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::two_sided_p;

/// Minimum length of each group's series.
pub const MIN_SERIES_LEN: usize = 10;

/// One group's weekly series of log reactions (`y`) and log post counts (`x`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ar1Series {
    pub group: String,
    /// Consecutive integer time steps.
    pub time: Vec<i64>,
    pub log_y: Vec<f64>,
    pub log_x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ar1Method {
    Ml,
    #[default]
    Reml,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ar1Group {
    pub group: String,
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    /// Marginal error variance.
    pub sigma2: f64,
    /// False when the predictor is constant; the slope is then fixed at 0.
    pub slope_identified: bool,
    pub var_log_x: f64,
    pub var_log_y: f64,
    /// Standardized innovations `z_t / sqrt(σ²(1-φ²))` after whitening.
    pub whitened_residuals: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ar1Fit {
    pub groups: Vec<Ar1Group>,
    pub phi_ar: f64,
    pub method: Ar1Method,
    /// Maximized log likelihood (restricted under REML).
    pub log_likelihood: f64,
    /// Parameter names matching the rows of `vcov`: per group intercept and
    /// (when identified) slope, then per group `log_sigma2`, then `atanh_phi`.
    pub names: Vec<String>,
    pub vcov: Vec<Vec<f64>>,
}

impl Ar1Fit {
    pub fn group(&self, name: &str) -> Result<&Ar1Group> {
        self.groups
            .iter()
            .find(|g| g.group == name)
            .ok_or_else(|| Error::UnseenLevel { factor: "group".into(), level: name.into() })
    }
}

/// Exact log density of `e` under a stationary AR(1) with marginal variance
/// `sigma2` and correlation `phi`.
pub fn ar1_log_density(e: &[f64], sigma2: f64, phi: f64) -> f64 {
    let n = e.len() as f64;
    let one_m = 1.0 - phi * phi;
    let mut ss = e.first().map_or(0.0, |v| v * v * one_m);
    for w in e.windows(2) {
        ss += (w[1] - phi * w[0]).powi(2);
    }
    -0.5 * n * (2.0 * std::f64::consts::PI * sigma2 * one_m).ln() + 0.5 * one_m.ln() - ss / (2.0 * sigma2 * one_m)
}

/// Prais-Winsten transform: rows become i.i.d. with variance `σ²(1-φ²)`.
fn whiten(v: &[f64], phi: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    if let Some(&first) = v.first() {
        out.push(first * (1.0 - phi * phi).sqrt());
    }
    out.extend(v.windows(2).map(|w| w[1] - phi * w[0]));
    out
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

struct GroupFit {
    beta: Vec<f64>,
    xtx_inv: DMatrix<f64>,
    sigma2: f64,
    resid: Vec<f64>,
}

/// GLS given φ, with the variance estimate that maximizes the chosen
/// criterion, floored so that exact fits stay finite.
fn gls(s: &Ar1Series, identified: bool, phi: f64, method: Ar1Method) -> Option<GroupFit> {
    let p = if identified { 2 } else { 1 };
    let n = s.log_y.len();
    let yt = whiten(&s.log_y, phi);
    let ones = whiten(&vec![1.0; n], phi);
    let xt = whiten(&s.log_x, phi);
    let cols: Vec<&Vec<f64>> = if identified { vec![&ones, &xt] } else { vec![&ones] };
    let xm = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let xtx = xm.transpose() * &xm;
    let xtx_inv = xtx.clone().cholesky()?.inverse();
    let beta = &xtx_inv * (xm.transpose() * DVector::from_column_slice(&yt));
    let resid: Vec<f64> = (0..n)
        .map(|i| s.log_y[i] - beta[0] - if identified { beta[1] * s.log_x[i] } else { 0.0 })
        .collect();
    let z = whiten(&resid, phi);
    let dof = match method {
        Ar1Method::Ml => n,
        Ar1Method::Reml => n - p,
    };
    let floor = 1e-12 * variance(&s.log_y).max(1e-300);
    let sigma2 = (z.iter().map(|v| v * v).sum::<f64>() / (dof as f64 * (1.0 - phi * phi))).max(floor);
    Some(GroupFit { beta: beta.iter().copied().collect(), xtx_inv, sigma2, resid })
}

/// Log likelihood of one group at variance `sigma2`; under REML this adds
/// `-½ log|X'Σ⁻¹X|` up to a constant.
fn criterion(f: &GroupFit, sigma2: f64, phi: f64, method: Ar1Method) -> f64 {
    let ll = ar1_log_density(&f.resid, sigma2, phi);
    match method {
        Ar1Method::Ml => ll,
        Ar1Method::Reml => {
            let p = f.beta.len() as f64;
            ll + 0.5 * f.xtx_inv.determinant().ln() + 0.5 * p * (sigma2 * (1.0 - phi * phi)).ln()
        }
    }
}

fn profile(series: &[Ar1Series], identified: &[bool], theta: f64, method: Ar1Method) -> Option<(f64, Vec<GroupFit>)> {
    let phi = theta.tanh();
    let mut ll = 0.0;
    let mut fits = Vec::with_capacity(series.len());
    for (s, &id) in series.iter().zip(identified) {
        let f = gls(s, id, phi, method)?;
        ll += criterion(&f, f.sigma2, phi, method);
        fits.push(f);
    }
    ll.is_finite().then_some((ll, fits))
}

/// Maximizes the profile likelihood over `θ = atanh φ`: a coarse grid
/// locates the bracket, golden-section search refines it.
fn maximize_theta<F: Fn(f64) -> f64>(f: F) -> f64 {
    const LO: f64 = -6.0;
    const HI: f64 = 6.0;
    const GRID: usize = 121;
    let h = (HI - LO) / (GRID - 1) as f64;
    let (mut best, mut best_v) = (0, f64::NEG_INFINITY);
    for i in 0..GRID {
        let v = f(LO + h * i as f64);
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let mut a = LO + h * best.saturating_sub(1) as f64;
    let mut b = LO + h * (best + 1).min(GRID - 1) as f64;
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn validate(series: &[Ar1Series]) -> Result<Vec<bool>> {
    if series.is_empty() {
        return Err(Error::InsufficientData("no groups".into()));
    }
    let mut seen = std::collections::HashSet::new();
    series
        .iter()
        .map(|s| {
            if !seen.insert(s.group.as_str()) {
                return Err(Error::Domain(format!("duplicate group `{}`", s.group)));
            }
            let n = s.log_y.len();
            if s.time.len() != n || s.log_x.len() != n {
                return Err(Error::Schema(format!("group `{}`: series lengths differ", s.group)));
            }
            if n < MIN_SERIES_LEN {
                return Err(Error::InsufficientData(format!(
                    "group `{}` has {n} time points, need at least {MIN_SERIES_LEN}",
                    s.group
                )));
            }
            if let Some(w) = s.time.windows(2).find(|w| w[1] != w[0] + 1) {
                return Err(Error::Domain(format!("group `{}`: time jumps from {} to {}", s.group, w[0], w[1])));
            }
            if s.log_y.iter().chain(&s.log_x).any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("group `{}` has non-finite values", s.group)));
            }
            Ok(variance(&s.log_x) > 1e-12 * s.log_x.iter().map(|v| v * v).sum::<f64>() / n as f64)
        })
        .collect()
}

/// Fits the model by exact REML.
pub fn fit_ar1_gaussian(series: &[Ar1Series]) -> Result<Ar1Fit> {
    fit_ar1_gaussian_with(series, Ar1Method::default())
}

pub fn fit_ar1_gaussian_with(series: &[Ar1Series], method: Ar1Method) -> Result<Ar1Fit> {
    let identified = validate(series)?;
    for (s, id) in series.iter().zip(&identified) {
        if !id {
            log::warn!("group `{}`: constant predictor, slope not identified", s.group);
        }
    }
    let neg_inf = f64::NEG_INFINITY;
    let theta = maximize_theta(|t| profile(series, &identified, t, method).map_or(neg_inf, |p| p.0));
    let (log_likelihood, fits) =
        profile(series, &identified, theta, method).ok_or_else(|| Error::Numerical("AR(1) profile likelihood failed".into()))?;
    let phi = theta.tanh();

    // Mean and covariance parameters are orthogonal in the Fisher information
    // of a Gaussian model, so the vcov is block diagonal: GLS blocks for the
    // coefficients and the observed information for (log σ², atanh φ).
    let mut names = Vec::new();
    let mut beta_blocks = Vec::new();
    for (s, (f, &id)) in series.iter().zip(fits.iter().zip(&identified)) {
        names.push(format!("{}:intercept", s.group));
        if id {
            names.push(format!("{}:slope", s.group));
        }
        beta_blocks.push(&f.xtx_inv * f.sigma2 * (1.0 - phi * phi));
    }
    let g = series.len();
    // Curvature is taken in (log innovation variance, θ), which stays well
    // conditioned near the unit root, then mapped to (log σ², θ) through
    // log σ² = log s² + 2 log cosh θ.
    let one_m = 1.0 - phi * phi;
    let inner: Vec<f64> = fits.iter().map(|f| (f.sigma2 * one_m).ln()).chain([theta]).collect();
    // Coefficients are re-profiled at every φ, which is what REML requires.
    let full_ll = |v: &[f64]| -> f64 {
        let ph = v[g].tanh();
        let om = 1.0 - ph * ph;
        let mut total = 0.0;
        for (k, (s, &id)) in series.iter().zip(&identified).enumerate() {
            match gls(s, id, ph, method) {
                Some(f) => total += criterion(&f, v[k].exp() / om, ph, method),
                None => return f64::NAN,
            }
        }
        total
    };
    let cov_block = observed_information(full_ll, &inner)
        .and_then(|h| h.cholesky().map(|c| c.inverse()))
        .map(|c| {
            let mut jac = DMatrix::identity(g + 1, g + 1);
            for k in 0..g {
                jac[(k, g)] = 2.0 * phi;
            }
            &jac * c * jac.transpose()
        })
        .unwrap_or_else(|| DMatrix::from_element(g + 1, g + 1, f64::NAN));
    for s in series {
        names.push(format!("{}:log_sigma2", s.group));
    }
    names.push("atanh_phi".into());
    let p = names.len();
    let mut vcov = DMatrix::zeros(p, p);
    let mut at = 0;
    for b in &beta_blocks {
        let k = b.nrows();
        vcov.view_mut((at, at), (k, k)).copy_from(b);
        at += k;
    }
    vcov.view_mut((at, at), (g + 1, g + 1)).copy_from(&cov_block);

    let mut groups = Vec::with_capacity(g);
    let mut at = 0;
    for (s, (f, &id)) in series.iter().zip(fits.iter().zip(&identified)) {
        let se_intercept = vcov[(at, at)].sqrt();
        let (slope, se_slope) = if id { (f.beta[1], vcov[(at + 1, at + 1)].sqrt()) } else { (0.0, f64::NAN) };
        at += if id { 2 } else { 1 };
        let scale = (f.sigma2 * (1.0 - phi * phi)).sqrt();
        groups.push(Ar1Group {
            group: s.group.clone(),
            intercept: f.beta[0],
            slope,
            se_intercept,
            se_slope,
            sigma2: f.sigma2,
            slope_identified: id,
            var_log_x: variance(&s.log_x),
            var_log_y: variance(&s.log_y),
            whitened_residuals: whiten(&f.resid, phi).iter().map(|z| z / scale).collect(),
        });
    }
    Ok(Ar1Fit { groups, phi_ar: phi, method, log_likelihood, names, vcov: crate::linalg::to_rows(&vcov) })
}

/// Negative Hessian of `f` by central second differences.
fn observed_information<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Option<DMatrix<f64>> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    let eval = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut v = x.to_vec();
        v[di] += si * h[di];
        v[dj] += sj * h[dj];
        f(&v)
    };
    let f0 = f(x);
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let d2 = (eval(i, 1.0, i, 0.0) - 2.0 * f0 + eval(i, -1.0, i, 0.0)) / (h[i] * h[i]);
        m[(i, i)] = -d2;
        for j in 0..i {
            let d2 = (eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0) + eval(i, -1.0, j, -1.0))
                / (4.0 * h[i] * h[j]);
            m[(i, j)] = -d2;
            m[(j, i)] = -d2;
        }
    }
    m.iter().all(|v| v.is_finite()).then_some(m)
}

/// Autocorrelation-adjusted Pearson correlation between log posts and log
/// reactions in `group`, with the Wald p-value of the group slope.
pub fn adjusted_correlation(fit: &Ar1Fit, group: &str) -> Result<(f64, f64)> {
    let g = fit.group(group)?;
    if !g.slope_identified || g.var_log_x <= 0.0 {
        return Err(Error::Domain(format!("group `{group}`: predictor has zero variance")));
    }
    if g.var_log_y <= 0.0 {
        return Err(Error::Domain(format!("group `{group}`: response has zero variance")));
    }
    let r = g.slope * (g.var_log_x / g.var_log_y).sqrt();
    Ok((r, two_sided_p(g.slope / g.se_slope)))
}

/// Sample autocorrelations at lags `1..=max_lag`, centered.
pub fn acf(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = x.iter().sum::<f64>() / n as f64;
    let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    (1..=max_lag)
        .map(|k| {
            if k >= n || c0 == 0.0 {
                return 0.0;
            }
            (0..n - k).map(|t| (x[t] - m) * (x[t + k] - m)).sum::<f64>() / c0
        })
        .collect()
}

/// Autocorrelations of the whitened residuals pooled over groups (each group
/// centered separately), at lags `1..=max_lag`.
pub fn residual_acf(fit: &Ar1Fit, max_lag: usize) -> Result<Vec<f64>> {
    if let Some(g) = fit.groups.iter().find(|g| max_lag >= g.whitened_residuals.len()) {
        return Err(Error::Domain(format!(
            "max_lag {max_lag} must be below the length of group `{}` ({})",
            g.group,
            g.whitened_residuals.len()
        )));
    }
    let mut num = vec![0.0; max_lag];
    let mut den = 0.0;
    for g in &fit.groups {
        let r = &g.whitened_residuals;
        let n = r.len();
        let m = r.iter().sum::<f64>() / n as f64;
        den += r.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        for (k, acc) in num.iter_mut().enumerate() {
            *acc += (0..n - k - 1).map(|t| (r[t] - m) * (r[t + k + 1] - m)).sum::<f64>();
        }
    }
    Ok(num.into_iter().map(|v| if den > 0.0 { v / den } else { 0.0 }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitening_unit_variance_first_row() {
        let w = whiten(&[2.0, 3.0, 5.0], 0.6);
        assert!((w[0] - 1.6).abs() < 1e-15);
        assert!((w[1] - 1.8).abs() < 1e-15);
        assert!((w[2] - 3.2).abs() < 1e-15);
    }

    #[test]
    fn acf_of_alternating_series() {
        let x: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let a = acf(&x, 2);
        assert!((a[0] + 0.99).abs() < 1e-12);
        assert!((a[1] - 0.98).abs() < 1e-12);
    }

    #[test]
    fn golden_section_finds_interior_maximum() {
        let t = maximize_theta(|t| -(t - 1.234).powi(2));
        assert!((t - 1.234).abs() < 1e-8);
    }
}
