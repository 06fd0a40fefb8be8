//! Third-order truncated Taylor jets in two variables.
//!
//! The count likelihoods are functions of the mean and dispersion linear
//! predictors `(eta, zeta)`. The Laplace gradient needs their derivatives up
//! to third order, which a jet carries through ordinary arithmetic.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet3 {
    pub v: f64,
    pub g: [f64; 2],
    pub h: [[f64; 2]; 2],
    pub t: [[[f64; 2]; 2]; 2],
}

impl Jet3 {
    pub fn constant(v: f64) -> Self {
        Self { v, g: [0.0; 2], h: [[0.0; 2]; 2], t: [[[0.0; 2]; 2]; 2] }
    }

    /// Independent variable `idx` (0 or 1) at value `v`.
    pub fn var(v: f64, idx: usize) -> Self {
        let mut j = Self::constant(v);
        j.g[idx] = 1.0;
        j
    }

    pub fn scale(self, c: f64) -> Self {
        let mut out = self;
        out.v *= c;
        for i in 0..2 {
            out.g[i] *= c;
            for j in 0..2 {
                out.h[i][j] *= c;
                for k in 0..2 {
                    out.t[i][j][k] *= c;
                }
            }
        }
        out
    }

    /// Applies a scalar function given its value and first three derivatives
    /// at `self.v` (Faà di Bruno to third order).
    pub fn compose(self, d: [f64; 4]) -> Self {
        let u = &self;
        let mut out = Self::constant(d[0]);
        for i in 0..2 {
            out.g[i] = d[1] * u.g[i];
            for j in 0..2 {
                out.h[i][j] = d[2] * u.g[i] * u.g[j] + d[1] * u.h[i][j];
                for k in 0..2 {
                    out.t[i][j][k] = d[3] * u.g[i] * u.g[j] * u.g[k]
                        + d[2] * (u.h[i][j] * u.g[k] + u.h[i][k] * u.g[j] + u.h[j][k] * u.g[i])
                        + d[1] * u.t[i][j][k];
                }
            }
        }
        out
    }

    pub fn exp(self) -> Self {
        let e = self.v.exp();
        self.compose([e, e, e, e])
    }

    pub fn ln(self) -> Self {
        let x = self.v;
        self.compose([x.ln(), 1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x)])
    }

    pub fn softplus(self) -> Self {
        let s = crate::special::logistic(self.v);
        let d2 = s * (1.0 - s);
        self.compose([crate::special::softplus(self.v), s, d2, d2 * (1.0 - 2.0 * s)])
    }
}

impl Add for Jet3 {
    type Output = Jet3;
    fn add(mut self, o: Jet3) -> Jet3 {
        self.v += o.v;
        for i in 0..2 {
            self.g[i] += o.g[i];
            for j in 0..2 {
                self.h[i][j] += o.h[i][j];
                for k in 0..2 {
                    self.t[i][j][k] += o.t[i][j][k];
                }
            }
        }
        self
    }
}

impl Neg for Jet3 {
    type Output = Jet3;
    fn neg(self) -> Jet3 {
        self.scale(-1.0)
    }
}

impl Sub for Jet3 {
    type Output = Jet3;
    fn sub(self, o: Jet3) -> Jet3 {
        self + (-o)
    }
}

impl Add<f64> for Jet3 {
    type Output = Jet3;
    fn add(mut self, c: f64) -> Jet3 {
        self.v += c;
        self
    }
}

impl Mul for Jet3 {
    type Output = Jet3;
    fn mul(self, o: Jet3) -> Jet3 {
        let (a, b) = (&self, &o);
        let mut out = Self::constant(a.v * b.v);
        for i in 0..2 {
            out.g[i] = a.g[i] * b.v + a.v * b.g[i];
            for j in 0..2 {
                out.h[i][j] = a.h[i][j] * b.v + a.g[i] * b.g[j] + a.g[j] * b.g[i] + a.v * b.h[i][j];
                for k in 0..2 {
                    out.t[i][j][k] = a.t[i][j][k] * b.v
                        + a.h[i][j] * b.g[k]
                        + a.h[i][k] * b.g[j]
                        + a.h[j][k] * b.g[i]
                        + a.g[i] * b.h[j][k]
                        + a.g[j] * b.h[i][k]
                        + a.g[k] * b.h[i][j]
                        + a.v * b.t[i][j][k];
                }
            }
        }
        out
    }
}

impl Mul<Jet3> for f64 {
    type Output = Jet3;
    fn mul(self, j: Jet3) -> Jet3 {
        j.scale(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // f(x, y) = exp(x) * ln(2 + y) + softplus(x - y)
    fn f_jet(x: f64, y: f64) -> Jet3 {
        let a = Jet3::var(x, 0);
        let b = Jet3::var(y, 1);
        a.exp() * (b + 2.0).ln() + (a - b).softplus()
    }

    fn f(x: f64, y: f64) -> f64 {
        x.exp() * (2.0 + y).ln() + crate::special::softplus(x - y)
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let (x, y) = (0.3, -0.7);
        let j = f_jet(x, y);
        assert!((j.v - f(x, y)).abs() < 1e-14);
        let h = 1e-4;
        let gx = |x: f64, y: f64| f_jet(x, y).g;
        let hx = |x: f64, y: f64| f_jet(x, y).h;
        for i in 0..2 {
            let e = if i == 0 { (h, 0.0) } else { (0.0, h) };
            let fd = (f(x + e.0, y + e.1) - f(x - e.0, y - e.1)) / (2.0 * h);
            assert!((j.g[i] - fd).abs() < 1e-8);
            let gp = gx(x + e.0, y + e.1);
            let gm = gx(x - e.0, y - e.1);
            let hp = hx(x + e.0, y + e.1);
            let hm = hx(x - e.0, y - e.1);
            for a in 0..2 {
                assert!((j.h[a][i] - (gp[a] - gm[a]) / (2.0 * h)).abs() < 1e-7);
                for b in 0..2 {
                    assert!((j.t[a][b][i] - (hp[a][b] - hm[a][b]) / (2.0 * h)).abs() < 1e-6);
                }
            }
        }
    }
}
