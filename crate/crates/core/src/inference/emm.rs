//! Estimated marginal means on the log scale with a joint covariance.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::frame::{Component, ModelData};
use crate::glmm::{GlmmFit, Predictor};

/// Linear map from the fixed effects that produced a set of estimates, so
/// that estimates from the same fit can be combined with their covariance.
#[derive(Debug, Clone)]
pub struct Basis {
    pub grad: DMatrix<f64>,
    pub vcov: Arc<DMatrix<f64>>,
}

/// Log-scale estimates with their asymptotic joint covariance.
#[derive(Debug, Clone)]
pub struct JointEstimates {
    pub names: Vec<String>,
    pub estimate: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub basis: Option<Basis>,
}

impl JointEstimates {
    /// Uncorrelated estimates with the given variances.
    pub fn independent(names: Vec<String>, estimate: Vec<f64>, variance: Vec<f64>) -> Self {
        Self {
            names,
            estimate: DVector::from_vec(estimate),
            cov: DMatrix::from_diagonal(&DVector::from_vec(variance)),
            basis: None,
        }
    }

    /// `grad * beta + offset` with covariance `grad V grad'`.
    pub fn linear(names: Vec<String>, grad: DMatrix<f64>, offset: DVector<f64>, beta: &DVector<f64>, vcov: Arc<DMatrix<f64>>) -> Self {
        let estimate = &grad * beta + offset;
        let cov = &grad * vcov.as_ref() * grad.transpose();
        Self { names, estimate, cov, basis: Some(Basis { grad, vcov }) }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn se(&self, i: usize) -> f64 {
        self.cov[(i, i)].max(0.0).sqrt()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Estimates `C x` for a `k x len` combination matrix `C`.
    pub fn combine(&self, names: Vec<String>, c: &DMatrix<f64>) -> Self {
        debug_assert_eq!(c.ncols(), self.len());
        let mut cov = c * &self.cov * c.transpose();
        cov = (&cov + cov.transpose()) * 0.5;
        Self {
            names,
            estimate: c * &self.estimate,
            cov,
            basis: self.basis.as_ref().map(|b| Basis { grad: c * &b.grad, vcov: b.vcov.clone() }),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let c = DMatrix::from_fn(idx.len(), self.len(), |r, j| if idx[r] == j { 1.0 } else { 0.0 });
        self.combine(idx.iter().map(|&i| self.names[i].clone()).collect(), &c)
    }

    /// Stacks two estimate sets, using the shared fit for the
    /// cross-covariance when both come from the same fit.
    pub fn stack(&self, other: &Self) -> Self {
        let (m, k) = (self.len(), other.len());
        let mut cov = DMatrix::zeros(m + k, m + k);
        cov.view_mut((0, 0), (m, m)).copy_from(&self.cov);
        cov.view_mut((m, m), (k, k)).copy_from(&other.cov);
        let mut basis = None;
        if let (Some(a), Some(b)) = (&self.basis, &other.basis) {
            if Arc::ptr_eq(&a.vcov, &b.vcov) {
                let cross = &a.grad * a.vcov.as_ref() * b.grad.transpose();
                cov.view_mut((0, m), (m, k)).copy_from(&cross);
                cov.view_mut((m, 0), (k, m)).copy_from(&cross.transpose());
                let mut grad = DMatrix::zeros(m + k, a.grad.ncols());
                grad.view_mut((0, 0), (m, a.grad.ncols())).copy_from(&a.grad);
                grad.view_mut((m, 0), (k, a.grad.ncols())).copy_from(&b.grad);
                basis = Some(Basis { grad, vcov: a.vcov.clone() });
            }
        }
        let mut names = self.names.clone();
        names.extend(other.names.iter().cloned());
        let mut estimate = self.estimate.as_slice().to_vec();
        estimate.extend_from_slice(other.estimate.as_slice());
        Self { names, estimate: DVector::from_vec(estimate), cov, basis }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmmCell {
    pub epoch: String,
    pub group: String,
    pub emm: f64,
    pub log_emm: f64,
    pub se_log: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Log EMMs for every group x epoch cell, stored group-major.
#[derive(Debug, Clone)]
pub struct EmmGrid {
    pub groups: Vec<String>,
    pub epochs: Vec<String>,
    pub log_emm: JointEstimates,
}

impl EmmGrid {
    pub fn index(&self, group: &str, epoch: usize) -> Result<usize> {
        let g = self
            .groups
            .iter()
            .position(|x| x == group)
            .ok_or_else(|| Error::Domain(format!("no group `{group}` in the EMM grid")))?;
        if epoch >= self.epochs.len() {
            return Err(Error::Domain(format!("no epoch {epoch} in the EMM grid")));
        }
        Ok(g * self.epochs.len() + epoch)
    }

    /// Log EMMs of one group across epochs.
    pub fn group(&self, group: &str) -> Result<JointEstimates> {
        let idx = (0..self.epochs.len()).map(|e| self.index(group, e)).collect::<Result<Vec<_>>>()?;
        Ok(self.log_emm.select(&idx))
    }

    /// Adds a group whose log EMM is the uniform average of `members`.
    pub fn with_average(&self, name: &str, members: &[&str]) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Domain(format!("average group `{name}` has no members")));
        }
        let n = self.log_emm.len();
        let ne = self.epochs.len();
        let mut c = DMatrix::zeros(n + ne, n);
        for i in 0..n {
            c[(i, i)] = 1.0;
        }
        for e in 0..ne {
            for m in members {
                c[(n + e, self.index(m, e)?)] += 1.0 / members.len() as f64;
            }
        }
        let mut names = self.log_emm.names.clone();
        names.extend(self.epochs.iter().map(|e| format!("{name}|{e}")));
        let mut groups = self.groups.clone();
        groups.push(name.to_string());
        Ok(Self { groups, epochs: self.epochs.clone(), log_emm: self.log_emm.combine(names, &c) })
    }

    pub fn cells(&self, alpha: f64) -> Vec<EmmCell> {
        let q = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - alpha / 2.0);
        let mut out = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            for (ei, e) in self.epochs.iter().enumerate() {
                let i = gi * self.epochs.len() + ei;
                let (l, se) = (self.log_emm.estimate[i], self.log_emm.se(i));
                out.push(EmmCell {
                    epoch: e.clone(),
                    group: g.clone(),
                    emm: l.exp(),
                    log_emm: l,
                    se_log: se,
                    ci_low: (l - q * se).exp(),
                    ci_high: (l + q * se).exp(),
                });
            }
        }
        out
    }
}

/// `x' Sigma x`.
pub fn quadratic_form(z: &[f64], sigma: &DMatrix<f64>) -> f64 {
    let v = DVector::from_column_slice(z);
    (v.transpose() * sigma * &v)[(0, 0)]
}

/// Log EMM `x'beta + 0.5 z'Sigma z` summed over the marginalized mean
/// random-effect terms (named by grouping factor, e.g. `outlet` and
/// `outlet:epoch`). Other random effects are conditioned at zero.
pub fn log_emm_offset(fit: &GlmmFit, cell: &ModelData, marginalize: &[&str]) -> Result<f64> {
    let mut total = 0.0;
    for re in &fit.re_cov {
        if re.predictor != Predictor::Mean || !marginalize.contains(&re.group_name().as_str()) {
            continue;
        }
        let z = re.specs.iter().map(|s| s.evaluate(cell).map(|v| v[0])).collect::<Result<Vec<_>>>()?;
        total += 0.5 * quadratic_form(&z, &re.cov_matrix());
    }
    Ok(total)
}

/// EMM grid over the `quality` and `epoch` levels of the fit. Missing
/// factors collapse to a single group `all` or epoch `0`.
pub fn emm(fit: &GlmmFit, marginalize: &[&str]) -> Result<EmmGrid> {
    if !fit.converged {
        return Err(Error::NotConverged("EMMs need a converged fit".into()));
    }
    for s in &fit.beta_specs {
        if let Some(Component::Numeric { column, .. }) = s.0.iter().find(|c| matches!(c, Component::Numeric { .. })) {
            return Err(Error::Formula(format!("EMM grid cannot fix numeric covariate `{column}`")));
        }
    }
    let groups = fit.factor_levels.get("quality").cloned().unwrap_or_else(|| vec!["all".into()]);
    let epochs = fit.factor_levels.get("epoch").cloned().unwrap_or_else(|| vec!["0".into()]);
    let p = fit.beta.len();
    let n = groups.len() * epochs.len();
    let mut grad = DMatrix::zeros(n, p);
    let mut offset = DVector::zeros(n);
    let mut names = Vec::with_capacity(n);
    for (gi, g) in groups.iter().enumerate() {
        for (ei, e) in epochs.iter().enumerate() {
            let i = gi * epochs.len() + ei;
            let mut cell = ModelData::new(1);
            cell.add_factor("quality", &[g.as_str()])?;
            cell.add_factor("epoch", &[e.as_str()])?;
            for (j, s) in fit.beta_specs.iter().enumerate() {
                grad[(i, j)] = s.evaluate(&cell)?[0];
            }
            offset[i] = log_emm_offset(fit, &cell, marginalize)?;
            names.push(format!("{g}|{e}"));
        }
    }
    let beta = DVector::from_column_slice(&fit.beta);
    let vcov = Arc::new(fit.vcov_beta_matrix());
    Ok(EmmGrid { groups, epochs, log_emm: JointEstimates::linear(names, grad, offset, &beta, vcov) })
}
