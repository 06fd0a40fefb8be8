//! Epoch contrasts, difference-in-difference ratios, the parallel-trends
//! test and family-wise adjusted summaries.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::emm::{EmmGrid, JointEstimates};
use super::mvn::adjust_family;
use crate::error::{Error, Result};
use crate::linalg::pinv_sym;
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    Sequential,
    EffectCoding,
    Did,
    CumulativeDid,
    TotalEffect,
}

/// A coding of epoch log EMMs into log ratios.
pub trait ContrastCoding: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> ContrastKind;
    /// Row labels and the `k x n_epochs` coefficient matrix.
    fn matrix(&self, epochs: &[String], baseline: Option<&[usize]>) -> Result<(Vec<String>, DMatrix<f64>)>;
}

/// Each epoch against the one before it.
pub struct Sequential;

impl ContrastCoding for Sequential {
    fn name(&self) -> &'static str {
        "sequential"
    }

    fn kind(&self) -> ContrastKind {
        ContrastKind::Sequential
    }

    fn matrix(&self, epochs: &[String], _: Option<&[usize]>) -> Result<(Vec<String>, DMatrix<f64>)> {
        let n = epochs.len();
        if n < 2 {
            return Err(Error::InsufficientData("sequential contrasts need at least 2 epochs".into()));
        }
        let mut c = DMatrix::zeros(n - 1, n);
        let mut labels = Vec::with_capacity(n - 1);
        for t in 1..n {
            c[(t - 1, t)] = 1.0;
            c[(t - 1, t - 1)] = -1.0;
            labels.push(format!("{} vs {}", epochs[t], epochs[t - 1]));
        }
        Ok((labels, c))
    }
}

/// Each epoch against the geometric mean over a baseline set of epochs.
pub struct EffectCoding;

impl ContrastCoding for EffectCoding {
    fn name(&self) -> &'static str {
        "effect_coding"
    }

    fn kind(&self) -> ContrastKind {
        ContrastKind::EffectCoding
    }

    fn matrix(&self, epochs: &[String], baseline: Option<&[usize]>) -> Result<(Vec<String>, DMatrix<f64>)> {
        let n = epochs.len();
        let all: Vec<usize> = (0..n).collect();
        let base = baseline.unwrap_or(&all);
        if base.is_empty() || base.iter().any(|&b| b >= n) {
            return Err(Error::Domain("effect-coding baseline must be a nonempty subset of the epochs".into()));
        }
        let label = if base.len() == n {
            "average".to_string()
        } else {
            format!("mean({})", base.iter().map(|&b| epochs[b].as_str()).collect::<Vec<_>>().join(","))
        };
        let mut c = DMatrix::zeros(n, n);
        for t in 0..n {
            c[(t, t)] += 1.0;
            for &b in base {
                c[(t, b)] -= 1.0 / base.len() as f64;
            }
        }
        Ok(((0..n).map(|t| format!("{} vs {label}", epochs[t])).collect(), c))
    }
}

pub fn contrast_registry() -> Registry<dyn ContrastCoding> {
    let mut r: Registry<dyn ContrastCoding> = Registry::new("contrast coding");
    r.register("sequential", Arc::new(Sequential));
    r.register("effect_coding", Arc::new(EffectCoding));
    r
}

/// Log ratios of one group's EMMs under `coding`.
pub fn contrast(grid: &EmmGrid, group: &str, coding: &dyn ContrastCoding, baseline: Option<&[usize]>) -> Result<JointEstimates> {
    let g = grid.group(group)?;
    let (labels, c) = coding.matrix(&grid.epochs, baseline)?;
    Ok(g.combine(labels.iter().map(|l| format!("{group}: {l}")).collect(), &c))
}

/// Contrast of contrasts `log psi_news - log psi_nonnews`, with the
/// cross-covariance taken from the shared fit when available.
pub fn did_estimate(news: &JointEstimates, nonnews: &JointEstimates) -> Result<JointEstimates> {
    let m = news.len();
    if nonnews.len() != m {
        return Err(Error::Domain(format!("mismatched contrast sets: {m} vs {}", nonnews.len())));
    }
    let strip = |n: &str| n.split_once(": ").map(|(_, l)| l.to_string()).unwrap_or_else(|| n.to_string());
    for (a, b) in news.names.iter().zip(&nonnews.names) {
        if strip(a) != strip(b) {
            return Err(Error::Domain(format!("mismatched contrasts `{a}` and `{b}`")));
        }
    }
    let both = news.stack(nonnews);
    let c = DMatrix::from_fn(m, 2 * m, |r, j| {
        if j == r {
            1.0
        } else if j == r + m {
            -1.0
        } else {
            0.0
        }
    });
    Ok(both.combine(news.names.iter().map(|n| format!("did: {}", strip(n))).collect(), &c))
}

/// `log mu(b) - log mu(a)` for `group`, and divided by the matching
/// reference-group ratio when `reference` is given.
pub fn total_effect(grid: &EmmGrid, group: &str, a: usize, b: usize, reference: Option<&str>) -> Result<JointEstimates> {
    let n = grid.log_emm.len();
    let row = |g: &str| -> Result<Vec<f64>> {
        let mut r = vec![0.0; n];
        r[grid.index(g, b)?] += 1.0;
        r[grid.index(g, a)?] -= 1.0;
        Ok(r)
    };
    let label = format!("{} vs {}", grid.epochs[b], grid.epochs[a]);
    let mut rows = vec![row(group)?];
    let mut names = vec![format!("{group}: {label}")];
    if let Some(r) = reference {
        let refr = row(r)?;
        rows.push(refr.clone());
        names.push(format!("{r}: {label}"));
        rows.push(rows[0].iter().zip(&refr).map(|(x, y)| x - y).collect());
        names.push(format!("causal {group}/{r}: {label}"));
    }
    let c = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    Ok(grid.log_emm.combine(names, &c))
}

/// Each tier's `a -> b` log ratio minus the average of those ratios.
pub fn tier_vs_average(grid: &EmmGrid, tiers: &[&str], a: usize, b: usize) -> Result<JointEstimates> {
    let n = grid.log_emm.len();
    let k = tiers.len() as f64;
    let mut c = DMatrix::zeros(tiers.len(), n);
    for i in 0..tiers.len() {
        for (j, u) in tiers.iter().enumerate() {
            let w = if i == j { 1.0 - 1.0 / k } else { -1.0 / k };
            c[(i, grid.index(u, b)?)] += w;
            c[(i, grid.index(u, a)?)] -= w;
        }
    }
    Ok(grid.log_emm.combine(tiers.iter().map(|t| format!("{t} vs average")).collect(), &c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub df: usize,
    pub p: f64,
    /// The covariance was singular and a pseudo-inverse was used.
    pub pseudo_inverse: bool,
}

/// Wald test of `tau = 0` for log-scale DiD estimates.
pub fn parallel_trends_test(taus: &JointEstimates) -> ChiSquareTest {
    let (pinv, rank) = pinv_sym(&taus.cov, 1e-10);
    let t = (taus.estimate.transpose() * &pinv * &taus.estimate)[(0, 0)].max(0.0);
    let p = if rank == 0 {
        1.0
    } else {
        ChiSquared::new(rank as f64).map(|d| 1.0 - d.cdf(t)).unwrap_or(f64::NAN)
    };
    ChiSquareTest { statistic: t, df: rank, p, pseudo_inverse: rank < taus.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastEstimate {
    pub kind: ContrastKind,
    pub label: String,
    pub log_ratio: f64,
    pub se_log: f64,
    pub ratio: f64,
    /// Simultaneous confidence bounds for the family.
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
}

/// Ratios, simultaneous intervals and max-|z| adjusted p-values for one
/// family of contrasts.
pub fn summarize(family: &JointEstimates, kind: ContrastKind, alpha: f64) -> Vec<ContrastEstimate> {
    let est = family.estimate.as_slice();
    let adj = adjust_family(est, &family.cov, alpha);
    (0..family.len())
        .map(|i| {
            let se = family.se(i);
            ContrastEstimate {
                kind,
                label: family.names[i].clone(),
                log_ratio: est[i],
                se_log: se,
                ratio: est[i].exp(),
                ci_low: (est[i] - adj.critical * se).exp(),
                ci_high: (est[i] + adj.critical * se).exp(),
                z: adj.z[i],
                p_raw: adj.p_raw[i],
                p_adjusted: adj.p_adjusted[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn grid(mu: &[f64]) -> EmmGrid {
        let n = mu.len();
        EmmGrid {
            groups: vec!["g".into()],
            epochs: (0..n).map(|e| e.to_string()).collect(),
            log_emm: JointEstimates {
                names: (0..n).map(|e| format!("g|{e}")).collect(),
                estimate: DVector::from_iterator(n, mu.iter().map(|m| m.ln())),
                cov: DMatrix::identity(n, n) * 0.01,
                basis: None,
            },
        }
    }

    #[test]
    fn hand_computed_ratios() {
        let g = grid(&[2.0, 4.0]);
        let s = contrast(&g, "g", &Sequential, None).unwrap();
        assert!((s.estimate[0].exp() - 2.0).abs() < 1e-12);
        let g = grid(&[1.0, 4.0, 2.0]);
        let e = contrast(&g, "g", &EffectCoding, None).unwrap();
        let r: Vec<f64> = e.estimate.iter().map(|v| v.exp()).collect();
        for (a, b) in r.iter().zip([0.5, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let single = contrast(&g, "g", &EffectCoding, Some(&[1])).unwrap();
        assert!(single.estimate[1].abs() < 1e-15);
    }

    #[test]
    fn did_of_identical_is_one_and_independent_case() {
        let g = grid(&[1.0, 3.0, 2.0]);
        let s = contrast(&g, "g", &Sequential, None).unwrap();
        let d = did_estimate(&s, &s).unwrap();
        assert!(d.estimate.iter().all(|v| v.abs() < 1e-15));
        let news = JointEstimates::independent(vec!["n: 1 vs 0".into()], vec![0.5f64.ln()], vec![0.04]);
        let non = JointEstimates::independent(vec!["x: 1 vs 0".into()], vec![0.0], vec![0.09]);
        let d = did_estimate(&news, &non).unwrap();
        assert!((d.estimate[0].exp() - 0.5).abs() < 1e-12);
        assert!((d.cov[(0, 0)] - 0.13).abs() < 1e-12);
    }

    #[test]
    fn zero_taus_give_unit_p() {
        let t = JointEstimates::independent(vec!["a".into(), "b".into()], vec![0.0, 0.0], vec![1.0, 2.0]);
        let r = parallel_trends_test(&t);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.df, 2);
        assert!((r.p - 1.0).abs() < 1e-12);
        let sing = JointEstimates {
            names: vec!["a".into(), "b".into()],
            estimate: DVector::from_vec(vec![1.0, 1.0]),
            cov: DMatrix::from_element(2, 2, 1.0),
            basis: None,
        };
        let r = parallel_trends_test(&sing);
        assert!(r.pseudo_inverse && r.df == 1);
    }

    #[test]
    fn registry_lookup() {
        let r = contrast_registry();
        assert_eq!(r.get("sequential").unwrap().kind(), ContrastKind::Sequential);
        assert!(r.get("helmert").is_err());
    }
}
