use engshift_core::ar1::*;
use engshift_core::synthetic::{ar1_path, generate_ar1_series, stream_rng, Ar1GroupSpec, Ar1Spec};
use engshift_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn toeplitz_log_density(e: &[f64], sigma2: f64, phi: f64) -> f64 {
    let n = e.len();
    let cov = DMatrix::from_fn(n, n, |i, j| sigma2 * phi.powi(i.abs_diff(j) as i32));
    let chol = cov.cholesky().unwrap();
    let v = DVector::from_column_slice(e);
    let quad = v.dot(&chol.solve(&v));
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

fn spec(groups: usize, phi: f64, len: usize, seed: u64) -> Ar1Spec {
    Ar1Spec {
        groups: (0..groups)
            .map(|k| Ar1GroupSpec {
                group: format!("g{k}"),
                intercept: 5.0,
                slope: 0.3 + 0.1 * k as f64,
                sigma: 0.5 + 0.1 * k as f64,
                x_mean: 4.0,
                x_sd: 0.5,
            })
            .collect(),
        phi_ar: phi,
        x_phi: 0.9,
        len,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exact_density_matches_toeplitz(
        e in prop::collection::vec(-3.0f64..3.0, 1..=12),
        sigma2 in 0.05f64..5.0,
        phi in -0.95f64..0.95,
    ) {
        let a = ar1_log_density(&e, sigma2, phi);
        let b = toeplitz_log_density(&e, sigma2, phi);
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn white_noise_gives_phi_near_zero() {
    let f = fit_ar1_gaussian(&generate_ar1_series(&spec(4, 0.0, 450, 3)).unwrap()).unwrap();
    assert!(f.phi_ar.abs() < 0.05, "phi_ar = {}", f.phi_ar);
}

#[test]
fn persistent_errors_recovered() {
    // Fixed seed; the acceptance target checks the rate over replications.
    let f = fit_ar1_gaussian(&generate_ar1_series(&spec(4, 0.985, 450, 11)).unwrap()).unwrap();
    assert!((f.phi_ar - 0.985).abs() < 0.01, "phi_ar = {}", f.phi_ar);
    for (g, k) in f.groups.iter().zip(0..) {
        let truth = 0.3 + 0.1 * k as f64;
        assert!((g.slope - truth).abs() < 4.0 * g.se_slope, "{}: {} vs {truth}", g.group, g.slope);
    }
}

#[test]
fn reml_is_less_biased_than_ml() {
    let (mut ml, mut reml) = (0.0, 0.0);
    for seed in 0..30 {
        let s = generate_ar1_series(&spec(1, 0.9, 100, seed)).unwrap();
        ml += fit_ar1_gaussian_with(&s, Ar1Method::Ml).unwrap().phi_ar;
        reml += fit_ar1_gaussian_with(&s, Ar1Method::Reml).unwrap().phi_ar;
    }
    assert!(reml > ml);
    assert!((reml / 30.0 - 0.9).abs() < (ml / 30.0 - 0.9).abs());
}

#[test]
fn identical_series_have_unit_correlation() {
    let mut s = generate_ar1_series(&spec(2, 0.5, 60, 5)).unwrap();
    s[0].log_y = s[0].log_x.clone();
    let f = fit_ar1_gaussian(&s).unwrap();
    let (r, p) = adjusted_correlation(&f, "g0").unwrap();
    assert!((r - 1.0).abs() < 1e-9, "r = {r}");
    assert!(p < 1e-12);
}

#[test]
fn zero_slope_gives_zero_correlation_and_wald_p() {
    let mut sp = spec(1, 0.6, 200, 9);
    sp.groups[0].slope = 0.0;
    let f = fit_ar1_gaussian(&generate_ar1_series(&sp).unwrap()).unwrap();
    let g = f.group("g0").unwrap();
    let (r, p) = adjusted_correlation(&f, "g0").unwrap();
    assert!(r.abs() < 0.2);
    assert!((r - g.slope * (g.var_log_x / g.var_log_y).sqrt()).abs() < 1e-15);
    assert!((p - engshift_core::inference::two_sided_p(g.slope / g.se_slope)).abs() < 1e-15);
    assert!(p > 0.01);
}

#[test]
fn constant_predictor_is_flagged() {
    let mut s = generate_ar1_series(&spec(2, 0.5, 40, 1)).unwrap();
    s[1].log_x = vec![2.0; 40];
    let f = fit_ar1_gaussian(&s).unwrap();
    let g = f.group("g1").unwrap();
    assert!(!g.slope_identified);
    assert!(matches!(adjusted_correlation(&f, "g1"), Err(Error::Domain(_))));
    assert!(adjusted_correlation(&f, "g0").is_ok());
    assert_eq!(f.names.len(), f.vcov.len());
}

#[test]
fn constant_response_is_an_error() {
    let mut s = generate_ar1_series(&spec(2, 0.5, 40, 1)).unwrap();
    s[0].log_y = vec![3.0; 40];
    let f = fit_ar1_gaussian(&s).unwrap();
    assert!(matches!(adjusted_correlation(&f, "g0"), Err(Error::Domain(_))));
}

#[test]
fn gaps_and_short_series_are_rejected() {
    let mut s = generate_ar1_series(&spec(1, 0.5, 30, 1)).unwrap();
    s[0].time[10] = 42;
    assert!(matches!(fit_ar1_gaussian(&s), Err(Error::Domain(_))));
    let short = generate_ar1_series(&spec(1, 0.5, 9, 1)).unwrap();
    assert!(matches!(fit_ar1_gaussian(&short), Err(Error::InsufficientData(_))));
}

#[test]
fn vcov_is_positive_definite() {
    let f = fit_ar1_gaussian(&generate_ar1_series(&spec(3, 0.985, 450, 2)).unwrap()).unwrap();
    let m = engshift_core::linalg::from_rows(&f.vcov);
    assert!(m.cholesky().is_some());
    assert!(f.phi_ar.abs() < 1.0);
    assert!(f.groups.iter().all(|g| g.sigma2 > 0.0));
}

#[test]
fn acf_before_and_after_whitening() {
    let mut rng = stream_rng(77, 0);
    let e = ar1_path(&mut rng, 2000, 0.9, 1.0);
    let raw = acf(&e, 5);
    assert!((raw[0] - 0.9).abs() < 0.03, "lag-1 = {}", raw[0]);

    let series = vec![Ar1Series {
        group: "a".into(),
        time: (0..2000).collect(),
        log_x: (0..2000).map(|t| ((t % 17) as f64).ln_1p()).collect(),
        log_y: e.iter().enumerate().map(|(t, v)| 1.0 + 0.5 * ((t % 17) as f64).ln_1p() + v).collect(),
    }];
    let f = fit_ar1_gaussian(&series).unwrap();
    let white = residual_acf(&f, 20).unwrap();
    assert!(white[0].abs() < 0.05, "whitened lag-1 = {}", white[0]);
    let band = 2.0 / (2000f64).sqrt();
    let inside = white.iter().filter(|v| v.abs() <= band).count();
    assert!(inside >= 17, "{inside}/20 lags inside the band");
    assert!(residual_acf(&f, 2000).is_err());
}

#[test]
fn fit_roundtrips_through_json() {
    let f = fit_ar1_gaussian(&generate_ar1_series(&spec(2, 0.7, 50, 4)).unwrap()).unwrap();
    let back: Ar1Fit = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
    assert_eq!(back.phi_ar, f.phi_ar);
    assert_eq!(back.method, Ar1Method::Reml);
}
