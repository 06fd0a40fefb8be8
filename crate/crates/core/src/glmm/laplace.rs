//! Laplace-approximated negative log marginal likelihood and its exact gradient.
//!
//! Random effects `u ~ N(0, Sigma)` enter the mean predictor `eta` and the
//! dispersion predictor `zeta`. With `f(u) = -sum l_i + u' Sigma^-1 u / 2` and
//! `H` the Hessian of `f` at its minimizer, the objective is
//!
//! ```text
//! L(theta) = f(u_hat) + log det H / 2 + sum_terms n_levels * log det Sigma_t / 2
//! ```
//!
//! `H` is sparse: the grouping factor with the most levels is eliminated
//! block by block and the remaining effects form a dense Schur complement.

use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::family::CountFamily;
use crate::frame::{Design, RandomBlock};
use crate::jet::Jet3;

/// Bounds on log Cholesky diagonals; outside them the objective is infinite.
const LOG_SD_MIN: f64 = -30.0;
const LOG_SD_MAX: f64 = 15.0;
/// Linear predictors beyond this magnitude are treated as infeasible.
const PRED_MAX: f64 = 300.0;

#[derive(Debug, Clone)]
pub struct RandomComponent {
    pub block: RandomBlock,
    /// 0 for the mean predictor, 1 for the dispersion predictor.
    pub comp: usize,
    in_e: bool,
    offset: usize,
}

impl RandomComponent {
    pub fn n_levels(&self) -> usize {
        self.block.levels.len()
    }

    pub fn n_theta(&self) -> usize {
        self.block.k * (self.block.k + 1) / 2
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    /// Index into the level-local system `[E block | touched O columns]`.
    loc: u32,
    /// Index into the global random-effect vector.
    glob: u32,
    comp: u8,
    z: f64,
}

#[derive(Debug, Clone, Default)]
struct LevelBlock {
    rows: Vec<u32>,
    /// Sorted O-space indices touched by the rows of this level.
    touched: Vec<u32>,
    starts: Vec<u32>,
    entries: Vec<Entry>,
}

impl LevelBlock {
    fn row_entries(&self, r: usize) -> &[Entry] {
        &self.entries[self.starts[r] as usize..self.starts[r + 1] as usize]
    }
}

/// Decoded covariance parameters.
struct Theta<'a> {
    beta: &'a [f64],
    gamma: &'a [f64],
    chol: Vec<DMatrix<f64>>,
    prec: Vec<DMatrix<f64>>,
    logdet: Vec<f64>,
}

struct LevelOut {
    nll: f64,
    g: Vec<f64>,
    a_chol: Option<Cholesky<f64, Dyn>>,
    b: DMatrix<f64>,
    w: DMatrix<f64>,
    c: DMatrix<f64>,
    logdet_a: f64,
}

/// Factorized Hessian of the penalized inner objective.
struct Assembly {
    f: f64,
    grad: Vec<f64>,
    a_chol: Vec<Option<Cholesky<f64, Dyn>>>,
    b: Vec<DMatrix<f64>>,
    w: Vec<DMatrix<f64>>,
    s_chol: Option<Cholesky<f64, Dyn>>,
    logdet: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct ObsDeriv {
    s: [f64; 2],
    d: [[f64; 2]; 2],
    h: [f64; 2],
}

/// The Laplace objective for one data set and model specification.
pub struct LaplaceProblem {
    y: Vec<u64>,
    x: Design,
    w: Design,
    re: Vec<RandomComponent>,
    family: Arc<dyn CountFamily>,
    ke: usize,
    ne: usize,
    mo: usize,
    blocks: Vec<LevelBlock>,
    warm: Mutex<Vec<f64>>,
    max_inner: usize,
}

impl std::fmt::Debug for LaplaceProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LaplaceProblem")
            .field("n", &self.y.len())
            .field("p", &self.x.p)
            .field("q", &self.w.p)
            .field("terms", &self.re.len())
            .field("eliminated", &(self.ne, self.ke))
            .field("dense", &self.mo)
            .finish()
    }
}

fn neg_derivs(j: &Jet3) -> ([f64; 2], [[f64; 2]; 2], [[[f64; 2]; 2]; 2]) {
    let s = [-j.g[0], -j.g[1]];
    let d = [[-j.h[0][0], -j.h[0][1]], [-j.h[1][0], -j.h[1][1]]];
    let mut t = [[[0.0; 2]; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                t[a][b][c] = -j.t[a][b][c];
            }
        }
    }
    (s, d, t)
}

/// Clamps the eigenvalues of a symmetric 2x2 matrix at zero.
fn psd_2x2(d: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let (a, b, c) = (d[0][0], d[0][1], d[1][1]);
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + rad, mean - rad);
    if l2 >= 0.0 {
        return d;
    }
    if l1 <= 0.0 {
        return [[0.0; 2]; 2];
    }
    // Keep only the positive eigen-direction.
    let (vx, vy) = if b.abs() > 1e-300 { (l1 - c, b) } else if a >= c { (1.0, 0.0) } else { (0.0, 1.0) };
    let norm = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = (vx / norm, vy / norm);
    [[l1 * vx * vx, l1 * vx * vy], [l1 * vx * vy, l1 * vy * vy]]
}

fn logdet_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

impl LaplaceProblem {
    pub fn new(
        y: Vec<u64>,
        x: Design,
        w: Design,
        random: Vec<(RandomBlock, usize)>,
        family: Arc<dyn CountFamily>,
        max_inner: usize,
    ) -> Self {
        let n = y.len();
        let mut re: Vec<RandomComponent> = random
            .into_iter()
            .map(|(block, comp)| RandomComponent { block, comp, in_e: false, offset: 0 })
            .collect();

        // Eliminate the grouping factor with the most levels.
        let e_group = re
            .iter()
            .max_by_key(|r| r.n_levels())
            .map(|r| r.block.term.group_name());
        let mut ke = 0;
        let mut mo = 0;
        for r in re.iter_mut() {
            if Some(r.block.term.group_name()) == e_group {
                r.in_e = true;
                r.offset = ke;
                ke += r.block.k;
            } else {
                r.offset = mo;
                mo += r.block.k * r.n_levels();
            }
        }
        let e_codes: Option<&Vec<u32>> = re.iter().find(|r| r.in_e).map(|r| &r.block.codes);
        let ne = re.iter().find(|r| r.in_e).map_or(1, |r| r.n_levels());

        let mut rows_by_level: Vec<Vec<u32>> = vec![Vec::new(); ne];
        for i in 0..n {
            let l = e_codes.map_or(0, |c| c[i] as usize);
            rows_by_level[l].push(i as u32);
        }
        let base_o = ne * ke;
        let blocks = rows_by_level
            .into_iter()
            .enumerate()
            .map(|(l, rows)| {
                let mut touched: Vec<u32> = Vec::new();
                for &i in &rows {
                    for r in re.iter().filter(|r| !r.in_e) {
                        let k = r.block.k;
                        let code = r.block.codes[i as usize] as usize;
                        for j in 0..k {
                            if r.block.z[i as usize * k + j] != 0.0 {
                                touched.push((r.offset + code * k + j) as u32);
                            }
                        }
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let mut starts = vec![0u32];
                let mut entries = Vec::new();
                for &i in &rows {
                    let i = i as usize;
                    for r in &re {
                        let k = r.block.k;
                        for j in 0..k {
                            let z = r.block.z[i * k + j];
                            if z == 0.0 {
                                continue;
                            }
                            let (loc, glob) = if r.in_e {
                                (r.offset + j, l * ke + r.offset + j)
                            } else {
                                let o = r.offset + r.block.codes[i] as usize * k + j;
                                let pos = touched.binary_search(&(o as u32)).expect("touched index");
                                (ke + pos, base_o + o)
                            };
                            entries.push(Entry { loc: loc as u32, glob: glob as u32, comp: r.comp as u8, z });
                        }
                    }
                    starts.push(entries.len() as u32);
                }
                LevelBlock { rows, touched, starts, entries }
            })
            .collect();
        let dim_u = ne * ke + mo;
        Self { y, x, w, re, family, ke, ne, mo, blocks, warm: Mutex::new(vec![0.0; dim_u]), max_inner }
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.p
    }

    pub fn q(&self) -> usize {
        self.w.p
    }

    pub fn n_params(&self) -> usize {
        self.x.p + self.w.p + self.re.iter().map(RandomComponent::n_theta).sum::<usize>()
    }

    pub fn random(&self) -> &[RandomComponent] {
        &self.re
    }

    pub fn mean_design(&self) -> &Design {
        &self.x
    }

    pub fn dispersion_design(&self) -> &Design {
        &self.w
    }

    pub fn response(&self) -> &[u64] {
        &self.y
    }

    pub fn family(&self) -> &dyn CountFamily {
        self.family.as_ref()
    }

    fn dim_u(&self) -> usize {
        self.ne * self.ke + self.mo
    }

    /// Offset of term `t` in the parameter vector.
    pub fn theta_offset(&self, t: usize) -> usize {
        self.x.p + self.w.p + self.re[..t].iter().map(RandomComponent::n_theta).sum::<usize>()
    }

    /// Lower Cholesky factor of term `t` from its log-Cholesky parameters.
    pub fn cholesky_factor(&self, t: usize, theta: &[f64]) -> DMatrix<f64> {
        let k = self.re[t].block.k;
        let off = self.theta_offset(t);
        let mut l = DMatrix::zeros(k, k);
        let mut idx = off;
        for r in 0..k {
            for c in 0..=r {
                l[(r, c)] = if r == c { theta[idx].exp() } else { theta[idx] };
                idx += 1;
            }
        }
        l
    }

    fn decode<'a>(&self, theta: &'a [f64]) -> Option<Theta<'a>> {
        if theta.len() != self.n_params() || theta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let (beta, rest) = theta.split_at(self.x.p);
        let (gamma, _) = rest.split_at(self.w.p);
        let mut chol = Vec::new();
        let mut prec = Vec::new();
        let mut logdet = Vec::new();
        for t in 0..self.re.len() {
            let off = self.theta_offset(t);
            let k = self.re[t].block.k;
            let mut idx = off;
            for r in 0..k {
                for c in 0..=r {
                    if r == c && !(LOG_SD_MIN..=LOG_SD_MAX).contains(&theta[idx]) {
                        return None;
                    }
                    idx += 1;
                }
            }
            let l = self.cholesky_factor(t, theta);
            let linv = l.clone().solve_lower_triangular(&DMatrix::identity(k, k))?;
            let p = linv.transpose() * &linv;
            logdet.push(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>());
            chol.push(l);
            prec.push(p);
        }
        Some(Theta { beta, gamma, chol, prec, logdet })
    }

    fn base_predictors(&self, tv: &Theta) -> Vec<[f64; 2]> {
        (0..self.y.len())
            .map(|i| {
                let e: f64 = self.x.row(i).iter().zip(tv.beta).map(|(a, b)| a * b).sum();
                let z: f64 = self.w.row(i).iter().zip(tv.gamma).map(|(a, b)| a * b).sum();
                [e, z]
            })
            .collect()
    }

    #[inline]
    fn predictors(&self, base: &[[f64; 2]], u: &[f64], block: &LevelBlock, r: usize) -> [f64; 2] {
        let i = block.rows[r] as usize;
        let mut p = base[i];
        for e in block.row_entries(r) {
            p[e.comp as usize] += e.z * u[e.glob as usize];
        }
        p
    }

    fn u_slice<'a>(&self, u: &'a [f64], t: usize, level: usize) -> &'a [f64] {
        let r = &self.re[t];
        let k = r.block.k;
        let start = if r.in_e { level * self.ke + r.offset } else { self.ne * self.ke + r.offset + level * k };
        &u[start..start + k]
    }

    fn u_start(&self, t: usize, level: usize) -> usize {
        let r = &self.re[t];
        if r.in_e {
            level * self.ke + r.offset
        } else {
            self.ne * self.ke + r.offset + level * r.block.k
        }
    }

    fn penalty(&self, tv: &Theta, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (t, r) in self.re.iter().enumerate() {
            let p = &tv.prec[t];
            let k = r.block.k;
            for l in 0..r.n_levels() {
                let v = self.u_slice(u, t, l);
                for a in 0..k {
                    for b in 0..k {
                        acc += 0.5 * v[a] * p[(a, b)] * v[b];
                    }
                }
            }
        }
        acc
    }

    /// Adds `Sigma^-1 u` to `g`.
    fn add_prec_u(&self, tv: &Theta, u: &[f64], g: &mut [f64]) {
        for (t, r) in self.re.iter().enumerate() {
            let p = &tv.prec[t];
            let k = r.block.k;
            for l in 0..r.n_levels() {
                let s = self.u_start(t, l);
                for a in 0..k {
                    let mut acc = 0.0;
                    for b in 0..k {
                        acc += p[(a, b)] * u[s + b];
                    }
                    g[s + a] += acc;
                }
            }
        }
    }

    fn inner_value(&self, tv: &Theta, base: &[[f64; 2]], u: &[f64]) -> f64 {
        let parts: Vec<f64> = self
            .blocks
            .par_iter()
            .map(|blk| {
                let mut nll = 0.0;
                for r in 0..blk.rows.len() {
                    let p = self.predictors(base, u, blk, r);
                    if p[0].abs() > PRED_MAX || p[1].abs() > PRED_MAX {
                        return f64::INFINITY;
                    }
                    nll -= self.family.loglik_jet(self.y[blk.rows[r] as usize], p[0], p[1]).v;
                }
                nll
            })
            .collect();
        let v = parts.iter().sum::<f64>() + self.penalty(tv, u);
        if v.is_finite() { v } else { f64::INFINITY }
    }

    fn assemble(&self, tv: &Theta, base: &[[f64; 2]], u: &[f64], psd: bool) -> Option<Assembly> {
        let ke = self.ke;
        let outs: Vec<Option<LevelOut>> = self
            .blocks
            .par_iter()
            .map(|blk| {
                let t = blk.touched.len();
                let mut nll = 0.0;
                let mut g = vec![0.0; ke + t];
                let mut a = DMatrix::<f64>::zeros(ke, ke);
                let mut b = DMatrix::<f64>::zeros(ke, t);
                let mut c = DMatrix::<f64>::zeros(t, t);
                for r in 0..blk.rows.len() {
                    let p = self.predictors(base, u, blk, r);
                    if p[0].abs() > PRED_MAX || p[1].abs() > PRED_MAX {
                        return None;
                    }
                    let j = self.family.loglik_jet(self.y[blk.rows[r] as usize], p[0], p[1]);
                    nll -= j.v;
                    let s = [-j.g[0], -j.g[1]];
                    let mut d = [[-j.h[0][0], -j.h[0][1]], [-j.h[1][0], -j.h[1][1]]];
                    if psd {
                        d = psd_2x2(d);
                    }
                    let ents = blk.row_entries(r);
                    for e in ents {
                        g[e.loc as usize] += e.z * s[e.comp as usize];
                    }
                    for e in ents {
                        for f in ents {
                            let v = e.z * f.z * d[e.comp as usize][f.comp as usize];
                            let (el, fl) = (e.loc as usize, f.loc as usize);
                            match (el < ke, fl < ke) {
                                (true, true) => a[(el, fl)] += v,
                                (true, false) => b[(el, fl - ke)] += v,
                                (false, false) => c[(el - ke, fl - ke)] += v,
                                (false, true) => {}
                            }
                        }
                    }
                }
                if !nll.is_finite() {
                    return None;
                }
                for (ti, re) in self.re.iter().enumerate().filter(|(_, r)| r.in_e) {
                    let k = re.block.k;
                    for x in 0..k {
                        for y in 0..k {
                            a[(re.offset + x, re.offset + y)] += tv.prec[ti][(x, y)];
                        }
                    }
                }
                if ke == 0 {
                    return Some(LevelOut { nll, g, a_chol: None, b, w: DMatrix::zeros(0, t), c, logdet_a: 0.0 });
                }
                let ch = a.cholesky()?;
                let logdet_a = logdet_chol(&ch);
                let w = ch.solve(&b);
                c -= b.transpose() * &w;
                Some(LevelOut { nll, g, a_chol: Some(ch), b, w, c, logdet_a })
            })
            .collect();

        let mut grad = vec![0.0; self.dim_u()];
        let base_o = self.ne * ke;
        let mut s = DMatrix::<f64>::zeros(self.mo, self.mo);
        for (ti, re) in self.re.iter().enumerate().filter(|(_, r)| !r.in_e) {
            let k = re.block.k;
            for l in 0..re.n_levels() {
                let o = re.offset + l * k;
                for x in 0..k {
                    for y in 0..k {
                        s[(o + x, o + y)] += tv.prec[ti][(x, y)];
                    }
                }
            }
        }
        let mut nll = 0.0;
        let mut logdet = 0.0;
        let mut a_chol = Vec::with_capacity(self.ne);
        let mut bs = Vec::with_capacity(self.ne);
        let mut ws = Vec::with_capacity(self.ne);
        for (l, out) in outs.into_iter().enumerate() {
            let out = out?;
            let blk = &self.blocks[l];
            nll += out.nll;
            logdet += out.logdet_a;
            grad[l * ke..(l + 1) * ke].copy_from_slice(&out.g[..ke]);
            for (x, &ox) in blk.touched.iter().enumerate() {
                grad[base_o + ox as usize] += out.g[ke + x];
                for (y, &oy) in blk.touched.iter().enumerate() {
                    s[(ox as usize, oy as usize)] += out.c[(x, y)];
                }
            }
            a_chol.push(out.a_chol);
            bs.push(out.b);
            ws.push(out.w);
        }
        self.add_prec_u(tv, u, &mut grad);
        let s_chol = if self.mo > 0 {
            let ch = s.cholesky()?;
            logdet += logdet_chol(&ch);
            Some(ch)
        } else {
            None
        };
        let f = nll + self.penalty(tv, u);
        if !f.is_finite() {
            return None;
        }
        Some(Assembly { f, grad, a_chol, b: bs, w: ws, s_chol, logdet })
    }

    /// Solves `H x = r` with the block elimination.
    fn solve(&self, asm: &Assembly, r: &[f64]) -> Vec<f64> {
        let ke = self.ke;
        let base_o = self.ne * ke;
        let mut x = vec![0.0; r.len()];
        let mut ys: Vec<DVector<f64>> = Vec::with_capacity(self.ne);
        let mut rhs_o = DVector::from_column_slice(&r[base_o..]);
        for (l, blk) in self.blocks.iter().enumerate() {
            if ke == 0 {
                ys.push(DVector::zeros(0));
                continue;
            }
            let rl = DVector::from_column_slice(&r[l * ke..(l + 1) * ke]);
            let yl = asm.a_chol[l].as_ref().expect("factor").solve(&rl);
            if !blk.touched.is_empty() {
                let bty = asm.b[l].transpose() * &yl;
                for (x, &o) in blk.touched.iter().enumerate() {
                    rhs_o[o as usize] -= bty[x];
                }
            }
            ys.push(yl);
        }
        let xo = match &asm.s_chol {
            Some(ch) => ch.solve(&rhs_o),
            None => DVector::zeros(0),
        };
        x[base_o..].copy_from_slice(xo.as_slice());
        for (l, blk) in self.blocks.iter().enumerate() {
            if ke == 0 {
                continue;
            }
            let mut xl = ys[l].clone();
            if !blk.touched.is_empty() {
                let xt = DVector::from_iterator(blk.touched.len(), blk.touched.iter().map(|&o| xo[o as usize]));
                xl -= &asm.w[l] * xt;
            }
            x[l * ke..(l + 1) * ke].copy_from_slice(xl.as_slice());
        }
        x
    }

    /// Newton iterations for the conditional modes.
    fn mode(&self, tv: &Theta, base: &[[f64; 2]], u0: Vec<f64>) -> Option<(Vec<f64>, Assembly)> {
        let mut u = u0;
        if self.dim_u() == 0 {
            return self.assemble(tv, base, &u, false).map(|a| (u, a));
        }
        let mut prev_dec = f64::INFINITY;
        for _ in 0..=self.max_inner {
            let exact = self.assemble(tv, base, &u, false);
            let (f0, grad, dir) = match &exact {
                Some(a) => (a.f, a.grad.clone(), self.solve(a, &a.grad)),
                None => {
                    let a = self.assemble(tv, base, &u, true)?;
                    let d = self.solve(&a, &a.grad);
                    (a.f, a.grad.clone(), d)
                }
            };
            let dec: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            if !dec.is_finite() {
                return None;
            }
            let scale = f0.abs().max(1.0);
            // Stop at the tolerance, or when round-off stalls quadratic convergence.
            if dec <= 1e-20 * scale || (exact.is_some() && dec <= 1e-12 * scale && dec >= 0.25 * prev_dec) {
                return exact.map(|a| (u, a));
            }
            if exact.is_some() && dec <= 1e-8 * scale {
                // Inside the quadratic region: full Newton steps, no line search.
                u.iter_mut().zip(&dir).for_each(|(a, d)| *a -= d);
                prev_dec = dec;
                continue;
            }
            prev_dec = dec;
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-12 {
                let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a - t * d).collect();
                let ft = self.inner_value(tv, base, &trial);
                if ft <= f0 - 1e-4 * t * dec {
                    u = trial;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                // At the round-off floor.
                return exact.map(|a| (u, a));
            }
        }
        let a = self.assemble(tv, base, &u, false)?;
        Some((u, a))
    }

    fn total(&self, tv: &Theta, asm: &Assembly) -> f64 {
        let sigma: f64 = self.re.iter().enumerate().map(|(t, r)| r.n_levels() as f64 * tv.logdet[t]).sum();
        asm.f + 0.5 * asm.logdet + 0.5 * sigma
    }

    fn take_warm(&self) -> Vec<f64> {
        self.warm.lock().map(|w| w.clone()).unwrap_or_else(|_| vec![0.0; self.dim_u()])
    }

    fn store_warm(&self, u: &[f64]) {
        if let Ok(mut w) = self.warm.lock() {
            w.copy_from_slice(u);
        }
    }

    fn locate(&self, tv: &Theta, base: &[[f64; 2]]) -> Option<(Vec<f64>, Assembly)> {
        let found = self.mode(tv, base, self.take_warm()).or_else(|| {
            let zero = vec![0.0; self.dim_u()];
            self.mode(tv, base, zero)
        });
        match &found {
            Some((u, _)) => self.store_warm(u),
            None => self.store_warm(&vec![0.0; self.dim_u()]),
        }
        found
    }

    /// Objective value; `+inf` where the Laplace approximation is undefined.
    pub fn value(&self, theta: &[f64]) -> f64 {
        let Some(tv) = self.decode(theta) else { return f64::INFINITY };
        let base = self.base_predictors(&tv);
        match self.locate(&tv, &base) {
            Some((_, asm)) => self.total(&tv, &asm),
            None => f64::INFINITY,
        }
    }

    /// Conditional modes per random term, each `levels x k` row-major.
    pub fn modes(&self, theta: &[f64]) -> Option<Vec<Vec<f64>>> {
        let tv = self.decode(theta)?;
        let base = self.base_predictors(&tv);
        let (u, _) = self.locate(&tv, &base)?;
        Some(
            (0..self.re.len())
                .map(|t| (0..self.re[t].n_levels()).flat_map(|l| self.u_slice(&u, t, l).to_vec()).collect())
                .collect(),
        )
    }

    /// Objective value and exact gradient.
    pub fn value_grad(&self, theta: &[f64]) -> Option<(f64, Vec<f64>)> {
        let tv = self.decode(theta)?;
        let base = self.base_predictors(&tv);
        let (u, asm) = self.locate(&tv, &base)?;
        let value = self.total(&tv, &asm);
        if !value.is_finite() {
            return None;
        }
        let ke = self.ke;
        let base_o = self.ne * ke;
        let sinv = asm.s_chol.as_ref().map(|c| c.inverse());

        // Pass 1: per-observation derivatives, P_i = J_i H^-1 J_i' and h_i.
        let pass1: Vec<(Vec<ObsDeriv>, Vec<f64>, DMatrix<f64>)> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(l, blk)| {
                let t = blk.touched.len();
                let m = ke + t;
                let mut hm = DMatrix::<f64>::zeros(m, m);
                let g_local = match &sinv {
                    Some(si) => DMatrix::from_fn(t, t, |a, b| si[(blk.touched[a] as usize, blk.touched[b] as usize)]),
                    None => DMatrix::zeros(0, 0),
                };
                if ke > 0 {
                    let ainv = asm.a_chol[l].as_ref().expect("factor").inverse();
                    let w = &asm.w[l];
                    let wg = w * &g_local;
                    let ee = ainv + &wg * w.transpose();
                    hm.view_mut((0, 0), (ke, ke)).copy_from(&ee);
                    if t > 0 {
                        hm.view_mut((0, ke), (ke, t)).copy_from(&(-&wg));
                        hm.view_mut((ke, 0), (t, ke)).copy_from(&(-wg.transpose()));
                    }
                }
                if t > 0 {
                    hm.view_mut((ke, ke), (t, t)).copy_from(&g_local);
                }
                let mut derivs = Vec::with_capacity(blk.rows.len());
                let mut gl = vec![0.0; m];
                for r in 0..blk.rows.len() {
                    let p = self.predictors(&base, &u, blk, r);
                    let j = self.family.loglik_jet(self.y[blk.rows[r] as usize], p[0], p[1]);
                    let (s, d, tt) = neg_derivs(&j);
                    let ents = blk.row_entries(r);
                    let mut pm = [[0.0; 2]; 2];
                    for e in ents {
                        for f in ents {
                            pm[e.comp as usize][f.comp as usize] += e.z * f.z * hm[(e.loc as usize, f.loc as usize)];
                        }
                    }
                    let mut h = [0.0; 2];
                    for (c, hc) in h.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for a in 0..2 {
                            for b in 0..2 {
                                acc += pm[a][b] * tt[a][b][c];
                            }
                        }
                        *hc = 0.5 * acc;
                    }
                    for e in ents {
                        gl[e.loc as usize] += e.z * h[e.comp as usize];
                    }
                    derivs.push(ObsDeriv { s, d, h });
                }
                let ee = hm.view((0, 0), (ke, ke)).into_owned();
                (derivs, gl, ee)
            })
            .collect();

        let mut gu = vec![0.0; self.dim_u()];
        for (l, (_, gl, _)) in pass1.iter().enumerate() {
            let blk = &self.blocks[l];
            gu[l * ke..(l + 1) * ke].copy_from_slice(&gl[..ke]);
            for (x, &o) in blk.touched.iter().enumerate() {
                gu[base_o + o as usize] += gl[ke + x];
            }
        }
        let a = self.solve(&asm, &gu);

        // Pass 2: fixed-effect gradients.
        let (p, q) = (self.x.p, self.w.p);
        let partial: Vec<Vec<f64>> = self
            .blocks
            .par_iter()
            .zip(pass1.par_iter())
            .map(|(blk, (derivs, _, _))| {
                let mut gb = vec![0.0; p + q];
                for r in 0..blk.rows.len() {
                    let i = blk.rows[r] as usize;
                    let od = &derivs[r];
                    let mut ja = [0.0; 2];
                    for e in blk.row_entries(r) {
                        ja[e.comp as usize] += e.z * a[e.glob as usize];
                    }
                    let e0 = od.s[0] + od.h[0] - (od.d[0][0] * ja[0] + od.d[0][1] * ja[1]);
                    let e1 = od.s[1] + od.h[1] - (od.d[1][0] * ja[0] + od.d[1][1] * ja[1]);
                    for (k, v) in self.x.row(i).iter().enumerate() {
                        gb[k] += e0 * v;
                    }
                    for (k, v) in self.w.row(i).iter().enumerate() {
                        gb[p + k] += e1 * v;
                    }
                }
                gb
            })
            .collect();
        let mut grad = vec![0.0; self.n_params()];
        for part in &partial {
            for (g, v) in grad.iter_mut().zip(part) {
                *g += v;
            }
        }

        // Covariance parameters.
        for (t, re) in self.re.iter().enumerate() {
            let k = re.block.k;
            let mut acc = DMatrix::<f64>::zeros(k, k);
            for l in 0..re.n_levels() {
                let ul = self.u_slice(&u, t, l);
                let al = self.u_slice(&a, t, l);
                let hinv: DMatrix<f64> = if re.in_e {
                    pass1[l].2.view((re.offset, re.offset), (k, k)).into_owned()
                } else {
                    let s0 = re.offset + l * k;
                    let si = sinv.as_ref().expect("dense block");
                    si.view((s0, s0), (k, k)).into_owned()
                };
                for x in 0..k {
                    for y in 0..k {
                        acc[(x, y)] += 0.5 * ul[x] * ul[y] + 0.5 * hinv[(x, y)]
                            - 0.5 * (al[x] * ul[y] + ul[x] * al[y]);
                    }
                }
            }
            let bm = &tv.prec[t] * acc * &tv.prec[t];
            let bl = bm * &tv.chol[t];
            let mut idx = self.theta_offset(t);
            for r in 0..k {
                for c in 0..=r {
                    grad[idx] = if r == c {
                        -2.0 * bl[(r, c)] * tv.chol[t][(r, r)] + re.n_levels() as f64
                    } else {
                        -2.0 * bl[(r, c)]
                    };
                    idx += 1;
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((value, grad))
    }
}
