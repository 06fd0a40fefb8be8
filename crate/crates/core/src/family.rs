//! Negative binomial count families.
//!
//! Both families are parametrized by the mean `mu` and a dispersion `phi`:
//!
//! - NB1 (linear): `Var = mu * (1 + phi)`, i.e. size `mu / phi` and success
//!   probability `1 / (1 + phi)`.
//! - NB2 (quadratic): `Var = mu + mu^2 / phi`, i.e. size `phi`.
//!
//! Families are looked up by name (`"nb1"`, `"nb2"`) through
//! [`family_registry`].

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet3;
use crate::registry::Registry;
use crate::special::{ln_factorial, ln_gamma_shift};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    #[serde(alias = "NB1_linear", alias = "nb1")]
    Nb1Linear,
    #[serde(alias = "NB2_quadratic", alias = "nb2")]
    Nb2Quadratic,
    #[serde(alias = "gaussian_ar1")]
    GaussianAr1,
}

impl Parametrization {
    /// Registry name of the count family, if this is a count parametrization.
    pub fn family_name(self) -> Option<&'static str> {
        match self {
            Parametrization::Nb1Linear => Some("nb1"),
            Parametrization::Nb2Quadratic => Some("nb2"),
            Parametrization::GaussianAr1 => None,
        }
    }
}

/// A count distribution with log link on the mean and log link on the
/// dispersion.
pub trait CountFamily: Send + Sync {
    fn name(&self) -> &'static str;

    fn parametrization(&self) -> Parametrization;

    fn log_pmf(&self, y: u64, mu: f64, phi: f64) -> Result<f64>;

    fn variance(&self, mu: f64, phi: f64) -> f64;

    /// Log-likelihood of one observation as a jet in `(eta, zeta) = (ln mu, ln phi)`.
    fn loglik_jet(&self, y: u64, eta: f64, zeta: f64) -> Jet3;

    fn sample(&self, rng: &mut dyn rand::RngCore, mu: f64, phi: f64) -> u64;
}

fn check_args(mu: f64, phi: f64) -> Result<()> {
    if !mu.is_finite() || mu <= 0.0 {
        return Err(Error::Domain(format!("mu must be finite and > 0, got {mu}")));
    }
    if !phi.is_finite() || phi <= 0.0 {
        return Err(Error::Domain(format!("phi must be finite and > 0, got {phi}")));
    }
    Ok(())
}

fn gamma_poisson(rng: &mut dyn rand::RngCore, shape: f64, scale: f64) -> u64 {
    let lambda = match Gamma::new(shape, scale) {
        Ok(g) => g.sample(rng),
        Err(_) => shape * scale,
    };
    if !(lambda > 0.0) {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(p) => {
            let k: f64 = p.sample(rng);
            k as u64
        }
        Err(_) => lambda.round() as u64,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Nb1;

impl CountFamily for Nb1 {
    fn name(&self) -> &'static str {
        "nb1"
    }

    fn parametrization(&self) -> Parametrization {
        Parametrization::Nb1Linear
    }

    fn log_pmf(&self, y: u64, mu: f64, phi: f64) -> Result<f64> {
        check_args(mu, phi)?;
        let r = mu / phi;
        let l1p = phi.ln_1p();
        let yf = y as f64;
        Ok(ln_gamma_shift(y, r)[0] - r * l1p + yf * (phi.ln() - l1p) - ln_factorial(y))
    }

    fn variance(&self, mu: f64, phi: f64) -> f64 {
        mu * (1.0 + phi)
    }

    fn loglik_jet(&self, y: u64, eta: f64, zeta: f64) -> Jet3 {
        let e = Jet3::var(eta, 0);
        let z = Jet3::var(zeta, 1);
        let r = (e - z).exp();
        let g = r.compose(ln_gamma_shift(y, r.v));
        let sp = z.softplus();
        let yf = y as f64;
        g - r * sp + (z - sp).scale(yf) + (-ln_factorial(y))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore, mu: f64, phi: f64) -> u64 {
        gamma_poisson(rng, mu / phi, phi)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Nb2;

impl CountFamily for Nb2 {
    fn name(&self) -> &'static str {
        "nb2"
    }

    fn parametrization(&self) -> Parametrization {
        Parametrization::Nb2Quadratic
    }

    fn log_pmf(&self, y: u64, mu: f64, phi: f64) -> Result<f64> {
        check_args(mu, phi)?;
        let yf = y as f64;
        Ok(ln_gamma_shift(y, phi)[0] - phi * (mu / phi).ln_1p() - yf * (phi / mu).ln_1p()
            - ln_factorial(y))
    }

    fn variance(&self, mu: f64, phi: f64) -> f64 {
        mu + mu * mu / phi
    }

    fn loglik_jet(&self, y: u64, eta: f64, zeta: f64) -> Jet3 {
        let e = Jet3::var(eta, 0);
        let z = Jet3::var(zeta, 1);
        let a = z.exp();
        let g = a.compose(ln_gamma_shift(y, a.v));
        let sp = (z - e).softplus();
        let yf = y as f64;
        g + a * (z - e) - (a + yf) * sp + (-ln_factorial(y))
    }

    fn sample(&self, rng: &mut dyn rand::RngCore, mu: f64, phi: f64) -> u64 {
        gamma_poisson(rng, phi, mu / phi)
    }
}

/// Registry holding the built-in count families.
pub fn family_registry() -> Registry<dyn CountFamily> {
    let mut reg: Registry<dyn CountFamily> = Registry::new("count family");
    reg.register("nb1", Arc::new(Nb1));
    reg.register("nb2", Arc::new(Nb2));
    reg
}

/// Resolves the family for a count parametrization.
pub fn family_for(p: Parametrization) -> Result<Arc<dyn CountFamily>> {
    let name = p.family_name().ok_or_else(|| {
        Error::Config("gaussian_ar1 is not a count parametrization; use the AR(1) model".into())
    })?;
    family_registry().get(name)
}

/// Exact negative binomial log probability mass.
pub fn nb_log_pmf(y: u64, mu: f64, phi: f64, parametrization: Parametrization) -> Result<f64> {
    family_for(parametrization)?.log_pmf(y, mu, phi)
}

/// Draws one count with the given mean and dispersion.
pub fn sample_count<R: Rng>(family: &dyn CountFamily, rng: &mut R, mu: f64, phi: f64) -> u64 {
    family.sample(rng, mu, phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn nb1_zero_count_half() {
        let lp = nb_log_pmf(0, 1.0, 1.0, Parametrization::Nb1Linear).unwrap();
        assert_eq!(lp.exp(), 0.5);
    }

    #[test]
    fn nb1_poisson_limit() {
        for &mu in &[0.5f64, 3.0, 40.0] {
            // The gap to Poisson grows like phi * y^2 / mu, so stay in the bulk.
            let top = (mu + 6.0 * mu.sqrt() + 3.0) as u64;
            for y in (0..=top).step_by(1 + top as usize / 12) {
                let lp = nb_log_pmf(y, mu, 1e-8, Parametrization::Nb1Linear).unwrap();
                let pois = y as f64 * mu.ln() - mu - ln_factorial(y);
                assert!((lp - pois).abs() < 1e-6, "mu={mu} y={y}: {lp} vs {pois}");
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(nb_log_pmf(1, 0.0, 1.0, Parametrization::Nb1Linear).is_err());
        assert!(nb_log_pmf(1, 1.0, f64::NAN, Parametrization::Nb2Quadratic).is_err());
        assert!(nb_log_pmf(1, f64::INFINITY, 1.0, Parametrization::Nb2Quadratic).is_err());
        assert!(nb_log_pmf(1, 1.0, 1.0, Parametrization::GaussianAr1).is_err());
    }

    #[test]
    fn jet_value_matches_pmf() {
        for fam in [&Nb1 as &dyn CountFamily, &Nb2] {
            for &(y, mu, phi) in &[(0u64, 2.0, 0.5), (13, 7.5, 3.0), (250, 180.0, 0.2)] {
                let j = fam.loglik_jet(y, f64::ln(mu), f64::ln(phi));
                let lp = fam.log_pmf(y, mu, phi).unwrap();
                assert!((j.v - lp).abs() < 1e-10, "{}", fam.name());
            }
        }
    }

    #[test]
    fn jet_derivatives_match_finite_differences() {
        let h = 1e-4;
        for fam in [&Nb1 as &dyn CountFamily, &Nb2] {
            for &(y, eta, zeta) in &[(0u64, 0.3, -0.4), (5, 1.2, 0.7), (90, 4.0, -1.5)] {
                let j = fam.loglik_jet(y, eta, zeta);
                for i in 0..2 {
                    let (de, dz) = if i == 0 { (h, 0.0) } else { (0.0, h) };
                    let p = fam.loglik_jet(y, eta + de, zeta + dz);
                    let m = fam.loglik_jet(y, eta - de, zeta - dz);
                    assert!((j.g[i] - (p.v - m.v) / (2.0 * h)).abs() < 1e-6);
                    for a in 0..2 {
                        assert!((j.h[a][i] - (p.g[a] - m.g[a]) / (2.0 * h)).abs() < 1e-5);
                        for b in 0..2 {
                            let fd = (p.h[a][b] - m.h[a][b]) / (2.0 * h);
                            assert!(
                                (j.t[a][b][i] - fd).abs() < 1e-4 * fd.abs().max(1.0),
                                "{} y={y} t[{a}][{b}][{i}] {} vs {fd}",
                                fam.name(),
                                j.t[a][b][i]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn sample_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for fam in [&Nb1 as &dyn CountFamily, &Nb2] {
            let (mu, phi) = (12.0, 2.0);
            let n = 40_000;
            let xs: Vec<f64> = (0..n).map(|_| fam.sample(&mut rng, mu, phi) as f64).collect();
            let m = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((m - mu).abs() < 0.15, "{} mean {m}", fam.name());
            let tv = fam.variance(mu, phi);
            assert!((v / tv - 1.0).abs() < 0.06, "{} var {v} vs {tv}", fam.name());
        }
    }
}
