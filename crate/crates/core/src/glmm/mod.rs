//! Negative binomial mixed models with a log-linear dispersion submodel,
//! fitted by maximizing the Laplace-approximated marginal likelihood.

pub mod laplace;
pub mod optim;

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{family_for, Parametrization};
use crate::formula::FormulaSpec;
use crate::frame::{coding_columns, group_key, ColumnSpec, Design, ModelData, RandomBlock};
use crate::linalg::{inverse_spd_or_pinv, to_rows, weighted_least_squares};

pub use laplace::LaplaceProblem;
use optim::{bfgs, fd_hessian, max_abs, BfgsOptions, Stop};

pub const FIT_FORMAT_VERSION: u32 = 1;

/// Random-effect SDs below this are reported as a boundary fit.
const BOUNDARY_SD: f64 = 1e-4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_outer: usize,
    pub max_inner: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    /// Compute the finite-difference Hessian (needed for standard errors).
    pub hessian: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_outer: 500, max_inner: 50, grad_tol: 1e-5, rel_tol: 1e-9, hessian: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    Mean,
    Dispersion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomEffectFit {
    pub predictor: Predictor,
    pub term: String,
    pub group: Vec<String>,
    pub coef_names: Vec<String>,
    pub specs: Vec<ColumnSpec>,
    pub cov: Vec<Vec<f64>>,
    pub sd: Vec<f64>,
    pub boundary: bool,
    pub levels: Vec<String>,
    /// Conditional modes, one row per level.
    pub modes: Vec<Vec<f64>>,
}

impl RandomEffectFit {
    pub fn group_name(&self) -> String {
        self.group.join(":")
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        crate::linalg::from_rows(&self.cov)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub stop: String,
    pub grad_max: f64,
    pub objective_trace: Vec<f64>,
    pub dropped_mean: Vec<String>,
    pub dropped_dispersion: Vec<String>,
    pub hessian_pd: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmmFit {
    pub format_version: u32,
    pub formula: FormulaSpec,
    pub response: String,
    pub beta_names: Vec<String>,
    pub beta: Vec<f64>,
    pub beta_specs: Vec<ColumnSpec>,
    pub vcov_beta: Vec<Vec<f64>>,
    pub disp_names: Vec<String>,
    pub disp_beta: Vec<f64>,
    pub disp_specs: Vec<ColumnSpec>,
    pub vcov_disp: Vec<Vec<f64>>,
    pub re_cov: Vec<RandomEffectFit>,
    pub param_names: Vec<String>,
    pub theta: Vec<f64>,
    pub vcov_theta: Vec<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub n_obs: usize,
    pub factor_levels: BTreeMap<String, Vec<String>>,
    pub diagnostics: FitDiagnostics,
}

impl GlmmFit {
    pub fn parametrization(&self) -> Parametrization {
        self.formula.parametrization
    }

    pub fn vcov_beta_matrix(&self) -> DMatrix<f64> {
        crate::linalg::from_rows(&self.vcov_beta)
    }

    pub fn coef(&self, name: &str) -> Option<f64> {
        self.beta_names.iter().position(|n| n == name).map(|i| self.beta[i])
    }

    pub fn random_effect(&self, predictor: Predictor, group: &str) -> Option<&RandomEffectFit> {
        self.re_cov.iter().find(|r| r.predictor == predictor && r.group_name() == group)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let fit: GlmmFit = serde_json::from_str(text)?;
        if fit.format_version != FIT_FORMAT_VERSION {
            return Err(Error::Schema(format!("unsupported fit format version {}", fit.format_version)));
        }
        Ok(fit)
    }
}

/// Conditional mean and standard deviation of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: f64,
    pub sigma: f64,
}

fn response_counts(data: &ModelData, response: &str) -> Result<Vec<u64>> {
    data.numeric(response)?
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as u64)
            } else {
                Err(Error::Domain(format!("response `{response}` must hold nonnegative integers, got {v}")))
            }
        })
        .collect()
}

/// Builds the Laplace objective for `spec` on `data` and returns it with the
/// names of aliased mean and dispersion columns that were dropped.
pub fn build_problem(
    data: &ModelData,
    response: &str,
    spec: &FormulaSpec,
    max_inner: usize,
) -> Result<(LaplaceProblem, Vec<String>, Vec<String>)> {
    let family = family_for(spec.parametrization)?;
    let y = response_counts(data, response)?;
    if y.is_empty() {
        return Err(Error::InsufficientData("no observations".into()));
    }
    let mut x = Design::build(coding_columns(&spec.mean.fixed, data)?, data)?;
    let dropped_mean = x.drop_aliased();
    let mut w = Design::build(coding_columns(&spec.dispersion.fixed, data)?, data)?;
    let dropped_disp = w.drop_aliased();
    for d in dropped_mean.iter().chain(&dropped_disp) {
        log::warn!("dropping aliased column {d}");
    }
    let mut random = Vec::new();
    for t in &spec.mean.random {
        random.push((RandomBlock::build(t, data)?, 0));
    }
    for t in &spec.dispersion.random {
        random.push((RandomBlock::build(t, data)?, 1));
    }
    let problem = LaplaceProblem::new(y, x, w, random, family, max_inner);
    Ok((problem, dropped_mean, dropped_disp))
}

/// Parameter names in the order of the optimizer's vector.
pub fn param_names(problem: &LaplaceProblem) -> Vec<String> {
    let mut names: Vec<String> = problem.mean_design().names();
    names.extend(problem.dispersion_design().names().into_iter().map(|n| format!("disp:{n}")));
    for r in problem.random() {
        let tag = if r.comp == 0 { "cond" } else { "disp" };
        let coefs = r.block.coef_names();
        for a in 0..r.block.k {
            for b in 0..=a {
                let what = if a == b { format!("log_sd({})", coefs[a]) } else { format!("chol({},{})", coefs[a], coefs[b]) };
                names.push(format!("{tag}:{}|{}:{what}", r.block.term, r.block.term.group_name()));
            }
        }
    }
    names
}

/// Quasi-Poisson fixed effects, moment-matched dispersion, random SDs at 0.5.
pub fn start_values(problem: &LaplaceProblem) -> Vec<f64> {
    let y: Vec<f64> = problem.response().iter().map(|&v| v as f64).collect();
    let n = y.len();
    let x = problem.mean_design();
    let ybar = (y.iter().sum::<f64>() / n as f64).max(1e-3);
    let mut eta = vec![ybar.ln(); n];
    let mut beta = vec![0.0; x.p];
    for _ in 0..30 {
        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let z: Vec<f64> = (0..n).map(|i| eta[i] + (y[i] - mu[i]) / mu[i]).collect();
        let Some((b, _)) = weighted_least_squares(&x.x, x.p, &z, Some(&mu)) else { break };
        let b: Vec<f64> = b.iter().copied().collect();
        let change = b.iter().zip(&beta).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        beta = b;
        for (i, e) in eta.iter_mut().enumerate() {
            *e = x.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>().clamp(-20.0, 20.0);
        }
        if change < 1e-8 {
            break;
        }
    }
    let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let dof = (n as f64 - x.p as f64).max(1.0);
    let phi = match problem.family().parametrization() {
        Parametrization::Nb2Quadratic => {
            let num: f64 = mu.iter().map(|m| m * m).sum();
            let den: f64 = y.iter().zip(&mu).map(|(y, m)| (y - m).powi(2) - m).sum();
            if den > 0.0 { (num / den).clamp(0.01, 1e4) } else { 100.0 }
        }
        _ => {
            let pearson: f64 = y.iter().zip(&mu).map(|(y, m)| (y - m).powi(2) / m).sum::<f64>() / dof;
            (pearson - 1.0).clamp(0.01, 1e4)
        }
    };
    let w = problem.dispersion_design();
    let target = vec![phi.ln(); n];
    let gamma: Vec<f64> = weighted_least_squares(&w.x, w.p, &target, None)
        .map(|(g, _)| g.iter().copied().collect())
        .unwrap_or_else(|| vec![0.0; w.p]);
    let mut theta = beta;
    theta.extend(gamma);
    for r in problem.random() {
        for a in 0..r.block.k {
            for b in 0..=a {
                theta.push(if a == b { 0.5f64.ln() } else { 0.0 });
            }
        }
    }
    theta
}

fn boundary_terms(problem: &LaplaceProblem, theta: &[f64]) -> Vec<bool> {
    (0..problem.random().len())
        .map(|t| {
            let l = problem.cholesky_factor(t, theta);
            l.diagonal().iter().any(|&d| d < BOUNDARY_SD)
        })
        .collect()
}

fn free_mask(problem: &LaplaceProblem, boundary: &[bool]) -> Vec<bool> {
    let mut mask = vec![true; problem.n_params()];
    for (t, &b) in boundary.iter().enumerate() {
        if b {
            let off = problem.theta_offset(t);
            for m in mask.iter_mut().skip(off).take(problem.random()[t].n_theta()) {
                *m = false;
            }
        }
    }
    mask
}

fn sub_matrix(h: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])])
}

/// Fits the model by Laplace-approximated maximum likelihood.
pub fn fit_nb_glmm(data: &ModelData, response: &str, spec: &FormulaSpec, opts: &FitOptions) -> Result<GlmmFit> {
    let (problem, dropped_mean, dropped_disp) = build_problem(data, response, spec, opts.max_inner)?;
    let start = start_values(&problem);
    fit_problem(&problem, data, response, spec, opts, start, dropped_mean, dropped_disp)
}

#[allow(clippy::too_many_arguments)]
fn fit_problem(
    problem: &LaplaceProblem,
    data: &ModelData,
    response: &str,
    spec: &FormulaSpec,
    opts: &FitOptions,
    start: Vec<f64>,
    dropped_mean: Vec<String>,
    dropped_disp: Vec<String>,
) -> Result<GlmmFit> {
    let bopts = BfgsOptions { max_iter: opts.max_outer, grad_tol: opts.grad_tol, rel_tol: opts.rel_tol, ..Default::default() };
    let res = bfgs(|t| problem.value_grad(t), start, bopts)
        .ok_or_else(|| Error::Numerical("Laplace objective undefined at the starting values".into()))?;
    let mut theta = res.x;
    let mut f = res.f;
    let mut grad = res.grad;
    let mut trace = res.trace;
    let iterations = res.iterations;
    let mut stop = res.stop;

    let n = problem.n_params();
    let gradient = |t: &[f64]| problem.value_grad(t).map(|(_, g)| g);
    let mut hessian: Option<DMatrix<f64>> = None;
    let mut hessian_pd = false;
    if opts.hessian && n > 0 {
        let mut h = fd_hessian(gradient, &theta);
        // Newton polishing with the finite-difference Hessian.
        let mut moved = 0.0f64;
        for _ in 0..6 {
            let Some(hm) = h.as_ref() else { break };
            let boundary = boundary_terms(problem, &theta);
            let mask = free_mask(problem, &boundary);
            let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
            let gfree: Vec<f64> = idx.iter().map(|&i| grad[i]).collect();
            if max_abs(&gfree) <= opts.grad_tol * 1e-2 {
                break;
            }
            let Some(ch) = sub_matrix(hm, &idx).cholesky() else { break };
            let step = ch.solve(&DVector::from_vec(gfree));
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..20 {
                let mut trial = theta.clone();
                for (a, &i) in idx.iter().enumerate() {
                    trial[i] -= t * step[a];
                }
                if let Some((ft, gt)) = problem.value_grad(&trial) {
                    if ft <= f + 1e-12 * f.abs().max(1.0) && max_abs(&gt) <= max_abs(&grad) * 1.5 + 1e-12 {
                        moved = moved.max(t * step.amax());
                        theta = trial;
                        f = ft.min(f);
                        grad = gt;
                        trace.push(f);
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if moved > 1e-3 {
            h = fd_hessian(gradient, &theta);
        }
        hessian = h;
    }

    let boundary = boundary_terms(problem, &theta);
    let mask = free_mask(problem, &boundary);
    let idx: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let grad_max = max_abs(&idx.iter().map(|&i| grad[i]).collect::<Vec<_>>());
    if grad_max <= opts.grad_tol {
        stop = Stop::Gradient;
    }
    let converged = grad_max <= opts.grad_tol;

    let mut vcov = DMatrix::<f64>::zeros(n, n);
    if let Some(h) = &hessian {
        let (inv, pd) = inverse_spd_or_pinv(&sub_matrix(h, &idx));
        hessian_pd = pd;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                vcov[(i, j)] = inv[(a, b)];
            }
        }
    }
    let (p, q) = (problem.p(), problem.q());
    let vcov_beta = vcov.view((0, 0), (p, p)).into_owned();
    let vcov_disp = vcov.view((p, p), (q, q)).into_owned();

    let modes = problem
        .modes(&theta)
        .ok_or_else(|| Error::Numerical("conditional modes undefined at the optimum".into()))?;
    let re_cov = problem
        .random()
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let l = problem.cholesky_factor(t, &theta);
            let cov = &l * l.transpose();
            let k = r.block.k;
            RandomEffectFit {
                predictor: if r.comp == 0 { Predictor::Mean } else { Predictor::Dispersion },
                term: r.block.term.to_string(),
                group: r.block.term.group.clone(),
                coef_names: r.block.coef_names(),
                specs: r.block.specs.clone(),
                sd: (0..k).map(|j| cov[(j, j)].sqrt()).collect(),
                cov: to_rows(&cov),
                boundary: boundary[t],
                levels: r.block.levels.clone(),
                modes: modes[t].chunks(k).map(<[f64]>::to_vec).collect(),
            }
        })
        .collect();

    let mut factor_levels = BTreeMap::new();
    for c in spec.mean.columns().into_iter().chain(spec.dispersion.columns()) {
        if data.is_factor(&c)? {
            factor_levels.insert(c.clone(), data.factor(&c)?.0.to_vec());
        }
    }
    Ok(GlmmFit {
        format_version: FIT_FORMAT_VERSION,
        formula: spec.clone(),
        response: response.to_string(),
        beta_names: problem.mean_design().names(),
        beta: theta[..p].to_vec(),
        beta_specs: problem.mean_design().specs.clone(),
        vcov_beta: to_rows(&vcov_beta),
        disp_names: problem.dispersion_design().names(),
        disp_beta: theta[p..p + q].to_vec(),
        disp_specs: problem.dispersion_design().specs.clone(),
        vcov_disp: to_rows(&vcov_disp),
        re_cov,
        param_names: param_names(problem),
        vcov_theta: to_rows(&vcov),
        theta,
        loglik: -f,
        converged,
        boundary: boundary.iter().any(|&b| b),
        n_obs: problem.n_obs(),
        factor_levels,
        diagnostics: FitDiagnostics {
            iterations,
            stop: format!("{stop:?}"),
            grad_max,
            objective_trace: trace,
            dropped_mean,
            dropped_dispersion: dropped_disp,
            hessian_pd,
        },
    })
}

fn linear_predictor(specs: &[ColumnSpec], coef: &[f64], data: &ModelData) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.n_rows()];
    for (s, &b) in specs.iter().zip(coef) {
        for (o, v) in out.iter_mut().zip(s.evaluate(data)?) {
            *o += b * v;
        }
    }
    Ok(out)
}

/// Conditional means and standard deviations at the rows of `data`, using
/// the conditional modes of every random effect.
pub fn predict_conditional(fit: &GlmmFit, data: &ModelData) -> Result<Vec<Moments>> {
    for (factor, levels) in &fit.factor_levels {
        let known: HashSet<&str> = levels.iter().map(String::as_str).collect();
        let (new_levels, codes) = data.factor(factor)?;
        let mut used = vec![false; new_levels.len()];
        codes.iter().for_each(|&c| used[c as usize] = true);
        for (l, u) in new_levels.iter().zip(used) {
            if u && !known.contains(l.as_str()) {
                return Err(Error::UnseenLevel { factor: factor.clone(), level: l.clone() });
            }
        }
    }
    let mut eta = linear_predictor(&fit.beta_specs, &fit.beta, data)?;
    let mut zeta = linear_predictor(&fit.disp_specs, &fit.disp_beta, data)?;
    for re in &fit.re_cov {
        let index: BTreeMap<&str, usize> = re.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let cols = re.specs.iter().map(|s| s.evaluate(data)).collect::<Result<Vec<_>>>()?;
        let target = if re.predictor == Predictor::Mean { &mut eta } else { &mut zeta };
        for (i, t) in target.iter_mut().enumerate() {
            let key = group_key(data, &re.group, i)?;
            let l = *index
                .get(key.as_str())
                .ok_or_else(|| Error::UnseenLevel { factor: re.group_name(), level: key.clone() })?;
            for (j, col) in cols.iter().enumerate() {
                *t += col[i] * re.modes[l][j];
            }
        }
    }
    let family = family_for(fit.parametrization())?;
    Ok(eta
        .iter()
        .zip(&zeta)
        .map(|(&e, &z)| {
            let (mu, phi) = (e.exp(), z.exp());
            Moments { mu, sigma: family.variance(mu, phi).sqrt() }
        })
        .collect())
}
