//! Quasi-Newton minimization with Armijo backtracking.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    pub rel_tol: f64,
    /// Largest allowed max-norm of a single step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 500, grad_tol: 1e-5, rel_tol: 1e-9, max_step: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Gradient,
    RelativeChange,
    LineSearch,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub stop: Stop,
    /// Objective after every accepted step (starting point first).
    pub trace: Vec<f64>,
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Minimizes `fg`, which returns the value and gradient or `None` where the
/// objective is undefined.
pub fn bfgs<F>(fg: F, x0: Vec<f64>, opts: BfgsOptions) -> Option<BfgsResult>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut f, mut g) = fg(&x0)?;
    let mut x = x0;
    let mut trace = vec![f];
    if n == 0 {
        return Some(BfgsResult { x, f, grad: g, iterations: 0, stop: Stop::Gradient, trace });
    }
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    for iter in 0..opts.max_iter {
        if max_abs(&g) <= opts.grad_tol {
            return Some(BfgsResult { x, f, grad: g, iterations: iter, stop: Stop::Gradient, trace });
        }
        let gv = DVector::from_column_slice(&g);
        let mut d = -(&hinv * &gv);
        let mut slope = gv.dot(&d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n);
            d = -gv.clone();
            slope = gv.dot(&d);
        }
        let dmax = d.amax();
        if dmax > opts.max_step {
            d *= opts.max_step / dmax;
            slope = gv.dot(&d);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            if let Some((ft, gt)) = fg(&trial) {
                if ft <= f + 1e-4 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            return Some(BfgsResult { x, f, grad: g, iterations: iter, stop: Stop::LineSearch, trace });
        };
        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if !scaled {
                hinv *= sy / yv.dot(&yv);
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (s y'H + H y s') + (rho^2 y'Hy + rho) s s'
            hinv -= rho * (&s * hy.transpose() + &hy * s.transpose());
            hinv += (rho * rho * yhy + rho) * (&s * s.transpose());
        }
        let rel = (f - fnew).abs() / f.abs().max(1.0);
        x = xn;
        f = fnew;
        g = gn;
        trace.push(f);
        if rel <= opts.rel_tol && max_abs(&g) <= opts.grad_tol.max(1e-3) {
            let stop = if max_abs(&g) <= opts.grad_tol { Stop::Gradient } else { Stop::RelativeChange };
            return Some(BfgsResult { x, f, grad: g, iterations: iter + 1, stop, trace });
        }
    }
    let stop = if max_abs(&g) <= opts.grad_tol { Stop::Gradient } else { Stop::IterationLimit };
    Some(BfgsResult { x, f, grad: g, iterations: opts.max_iter, stop, trace })
}

/// Hessian by central differences of an analytic gradient.
pub fn fd_hessian<G>(grad: G, x: &[f64]) -> Option<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        let step = 1e-4 * x[k].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += step;
        xm[k] -= step;
        let gp = grad(&xp)?;
        let gm = grad(&xm)?;
        for j in 0..n {
            h[(j, k)] = (gp[j] - gm[j]) / (2.0 * step);
        }
    }
    crate::linalg::symmetrize(&mut h);
    Some(h)
}
