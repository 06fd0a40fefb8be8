//! Ordinary least squares with classical standard errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub r2: f64,
    pub adj_r2: f64,
    pub sigma2: f64,
    pub n: usize,
    pub vcov: Vec<Vec<f64>>,
}

/// Fits `y ~ X` with `X` row-major `n x p`.
pub fn ols(x: &[f64], p: usize, y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    if n <= p {
        return Err(Error::InsufficientData(format!("{n} rows for {p} coefficients")));
    }
    let (beta, xtx_inv) = weighted_least_squares(x, p, y, None)
        .ok_or_else(|| Error::SingularDesign("X'X is not positive definite".into()))?;
    // Reject near-collinear designs that Cholesky still accepts.
    let worst = (0..p).map(|j| xtx_inv[(j, j)]).fold(0.0f64, f64::max);
    if !worst.is_finite() || worst > 1e14 {
        return Err(Error::SingularDesign("design is numerically rank deficient".into()));
    }
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut rss = 0.0;
    let mut tss = 0.0;
    for i in 0..n {
        let fitted: f64 = x[i * p..(i + 1) * p].iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
        rss += (y[i] - fitted).powi(2);
        tss += (y[i] - ybar).powi(2);
    }
    let sigma2 = rss / (n - p) as f64;
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - p) as f64;
    let vcov = xtx_inv * sigma2;
    Ok(OlsFit {
        coef: beta.iter().copied().collect(),
        se: (0..p).map(|j| vcov[(j, j)].max(0.0).sqrt()).collect(),
        r2,
        adj_r2,
        sigma2,
        n,
        vcov: crate::linalg::to_rows(&vcov),
    })
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return None;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (da, db) = (a[i] - ma, b[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..6).flat_map(|i| [1.0, i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| 1.0 + 2.0 * i as f64).collect();
        let f = ols(&x, 2, &y).unwrap();
        assert!((f.coef[1] - 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_is_singular() {
        let x: Vec<f64> = (0..6).flat_map(|_| [1.0, 3.0]).collect();
        let y: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert!(matches!(ols(&x, 2, &y), Err(Error::SingularDesign(_))));
    }
}
