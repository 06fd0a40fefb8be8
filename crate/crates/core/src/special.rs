//! Gamma-family special functions with the derivatives needed by the
//! count likelihoods (up to third order).

pub use statrs::function::factorial::ln_factorial;
pub use statrs::function::gamma::{digamma, ln_gamma};

const RECURSE_TO: f64 = 10.0;

/// First derivative of the digamma function.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < RECURSE_TO {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let z = 1.0 / x;
    let z2 = z * z;
    acc + z + 0.5 * z2
        + z * z2 * (1.0 / 6.0 - z2 * (1.0 / 30.0 - z2 * (1.0 / 42.0 - z2 * (1.0 / 30.0))))
}

/// Second derivative of the digamma function.
pub fn tetragamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < RECURSE_TO {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let z = 1.0 / x;
    let z2 = z * z;
    acc - z2
        - z2 * z
        - 0.5 * z2 * z2
        + z2 * z2 * z2 * (1.0 / 6.0 - z2 * (1.0 / 6.0 - z2 * (3.0 / 10.0 - z2 * (5.0 / 6.0))))
}

/// Stirling remainder of `ln Γ(z)` beyond `(z - 1/2) ln z - z + ln(2π)/2`.
fn stirling_tail(z: f64) -> f64 {
    let w = 1.0 / z;
    let w2 = w * w;
    w * (1.0 / 12.0 - w2 * (1.0 / 360.0 - w2 * (1.0 / 1260.0 - w2 * (1.0 / 1680.0))))
}

/// `ln Γ(y + r) - ln Γ(r)` and its first three derivatives in `r`.
///
/// Small counts are summed term by term; large shape values use a Stirling
/// difference so the result keeps full precision when `r` is huge (the
/// Poisson limit of the negative binomial).
pub fn ln_gamma_shift(y: u64, r: f64) -> [f64; 4] {
    if y == 0 {
        return [0.0; 4];
    }
    if y < 40 {
        let mut out = [0.0; 4];
        for j in 0..y {
            let v = r + j as f64;
            let inv = 1.0 / v;
            out[0] += v.ln();
            out[1] += inv;
            out[2] -= inv * inv;
            out[3] += 2.0 * inv * inv * inv;
        }
        return out;
    }
    let yf = y as f64;
    let a = yf + r;
    let value = if r >= 10.0 {
        (r - 0.5) * (yf / r).ln_1p() + yf * a.ln() - yf + stirling_tail(a) - stirling_tail(r)
    } else {
        ln_gamma(a) - ln_gamma(r)
    };
    [
        value,
        digamma(a) - digamma(r),
        trigamma(a) - trigamma(r),
        tetragamma(a) - tetragamma(r),
    ]
}

/// `ln(1 + e^x)` evaluated without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn polygamma_match_finite_differences() {
        for &x in &[0.3f64, 1.0, 2.5, 9.9, 10.1, 55.0, 1e4] {
            let h = 1e-5 * x.max(1.0);
            let fd1 = central(digamma, x, h);
            assert!((trigamma(x) - fd1).abs() < 1e-6 * trigamma(x).abs().max(1.0), "x={x}");
            let fd2 = central(trigamma, x, h);
            assert!((tetragamma(x) - fd2).abs() < 1e-5 * tetragamma(x).abs().max(1e-3), "x={x}");
        }
    }

    #[test]
    fn known_values() {
        // psi_1(1) = pi^2 / 6, psi_2(1) = -2 zeta(3)
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0) - pi2_6).abs() < 1e-12);
        assert!((tetragamma(1.0) + 2.0 * 1.202_056_903_159_594_2).abs() < 1e-12);
    }

    #[test]
    fn gamma_shift_branches_agree() {
        for &y in &[1u64, 7, 39, 40, 41, 250, 10_000] {
            for &r in &[0.2, 3.0, 9.5, 10.5, 1e3, 1e9] {
                let got = ln_gamma_shift(y, r);
                // Term-by-term sum: exact up to rounding for any r.
                let direct: f64 = (0..y).map(|j| (r + j as f64).ln()).sum();
                let tol = 1e-11 * direct.abs().max(1.0);
                assert!((got[0] - direct).abs() < tol, "y={y} r={r}: {} vs {direct}", got[0]);
                let d1 = digamma(y as f64 + r) - digamma(r);
                assert!((got[1] - d1).abs() < 1e-9 * d1.abs().max(1.0));
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((logistic(0.0) - 0.5).abs() < 1e-15);
    }
}
