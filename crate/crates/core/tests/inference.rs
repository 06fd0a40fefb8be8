use chrono::NaiveDate;
use engshift_core::epoch::EpochPartition;
use engshift_core::family::Parametrization;
use engshift_core::formula::FormulaSpec;
use engshift_core::glmm::{fit_nb_glmm, FitOptions, GlmmFit, Predictor};
use engshift_core::inference::emm::quadratic_form;
use engshift_core::inference::*;
use engshift_core::ingest::Quality;
use engshift_core::signal::StudyWindow;
use engshift_core::synthetic::{generate_panel, stream_rng, PanelTruth};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 6).unwrap()
}

fn truth(groups: Vec<Quality>, cps: Vec<usize>, did_log: Vec<f64>, seed: u64) -> PanelTruth {
    let n_epochs = cps.len() + 1;
    PanelTruth {
        start: start(),
        changepoints: cps,
        log_mean: groups.iter().enumerate().map(|(g, _)| (0..n_epochs).map(|e| 2.5 + 0.2 * g as f64 + 0.1 * e as f64).collect()).collect(),
        groups,
        did_log,
        sd_outlet: 0.6,
        sd_outlet_epoch: 0.15,
        sd_day: 0.0,
        parametrization: Parametrization::Nb1Linear,
        phi: 2.0,
        posts_per_day: 2.0,
        rate_sd: 0.0,
        views_per_reaction: 0.0,
        seed,
    }
}

/// Small quality-only fit with an outlet intercept and a day-level random
/// slope on quality, used as a carrier for controlled covariances.
fn carrier_fit() -> GlmmFit {
    let t = truth(vec![Quality::Low, Quality::Medium], vec![], vec![], 3);
    let panel = generate_panel(&t, 10, 30).unwrap();
    let window = StudyWindow::new(start(), start() + chrono::Days::new(30)).unwrap();
    let frame = panel_frame(&panel.table, &panel.outlets, &window, None, Scope::NewsOnly, 0).unwrap();
    let spec = FormulaSpec::parse("quality + (1|outlet) + (1+quality|year:month:day)", "1", Parametrization::Nb1Linear).unwrap();
    let fit = fit_nb_glmm(&frame.data, "reactions", &spec, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    fit
}

fn set_cov(fit: &mut GlmmFit, group: &str, cov: Vec<Vec<f64>>) {
    let re = fit.re_cov.iter_mut().find(|r| r.predictor == Predictor::Mean && r.group_name() == group).unwrap();
    re.sd = (0..cov.len()).map(|i| cov[i][i].sqrt()).collect();
    re.cov = cov;
}

const MARG: [&str; 2] = ["outlet", "year:month:day"];

#[test]
fn closed_form_emm_matches_monte_carlo() {
    let mut fit = carrier_fit();
    let n = 1_000_000;
    let mut rng = stream_rng(2024, 0);
    let draws: Vec<[f64; 3]> = (0..n)
        .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
        .collect();
    for sigma in [0.3, 0.6, 0.9, 1.2] {
        // Outlet and day intercepts split the variance of the low tier; the
        // medium tier adds a correlated slope.
        let (so, sd, ss, rho) = (sigma * 0.6, sigma * 0.8, sigma * 0.3, -0.4);
        set_cov(&mut fit, "outlet", vec![vec![so * so]]);
        set_cov(&mut fit, "year:month:day", vec![vec![sd * sd, rho * sd * ss], vec![rho * sd * ss, ss * ss]]);
        let grid = emm(&fit, &MARG).unwrap();
        let fixed = grid.log_emm.basis.as_ref().unwrap().grad.clone() * DVector::from_column_slice(&fit.beta);
        for (gi, g) in grid.groups.iter().enumerate() {
            let slope = if g == "low" { 0.0 } else { 1.0 };
            let mut acc = 0.0;
            for d in &draws {
                let b_day = sd * d[1];
                let b_slope = ss * (rho * d[1] + (1.0 - rho * rho).sqrt() * d[2]);
                acc += (so * d[0] + b_day + slope * b_slope).exp();
            }
            let mc = fixed[gi].exp() * acc / n as f64;
            let closed = grid.log_emm.estimate[gi].exp();
            let rel = (closed / mc - 1.0).abs();
            assert!(rel < 0.005, "sigma {sigma} group {g}: closed {closed} vs MC {mc}");
        }
    }
}

#[test]
fn emm_is_never_below_the_conditional_mean() {
    let mut fit = carrier_fit();
    let grid = emm(&fit, &MARG).unwrap();
    let fixed = grid.log_emm.basis.as_ref().unwrap().grad.clone() * DVector::from_column_slice(&fit.beta);
    for i in 0..grid.log_emm.len() {
        assert!(grid.log_emm.estimate[i] >= fixed[i]);
    }

    set_cov(&mut fit, "outlet", vec![vec![0.0]]);
    set_cov(&mut fit, "year:month:day", vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    let grid = emm(&fit, &MARG).unwrap();
    assert_eq!(grid.log_emm.estimate, grid.log_emm.basis.as_ref().unwrap().grad.clone() * DVector::from_column_slice(&fit.beta));

    set_cov(&mut fit, "outlet", vec![vec![1.0]]);
    let grid = emm(&fit, &MARG).unwrap();
    let fixed = grid.log_emm.basis.as_ref().unwrap().grad.clone() * DVector::from_column_slice(&fit.beta);
    for i in 0..grid.log_emm.len() {
        assert!((grid.log_emm.estimate[i] - fixed[i] - 0.5).abs() < 1e-15);
    }
    // Terms that are not marginalized are conditioned at zero.
    let grid = emm(&fit, &[]).unwrap();
    assert_eq!(grid.log_emm.estimate, fixed);
}

fn random_grid(mu: &[f64], factor: &[f64], groups: usize) -> EmmGrid {
    let n = mu.len();
    let ne = n / groups;
    let l = DMatrix::from_fn(n, n, |i, j| if j <= i { factor[(i * n + j) % factor.len()] } else { 0.0 });
    EmmGrid {
        groups: (0..groups).map(|g| format!("g{g}")).collect(),
        epochs: (0..ne).map(|e| e.to_string()).collect(),
        log_emm: JointEstimates {
            names: (0..n).map(|i| format!("g{}|{}", i / ne, i % ne)).collect(),
            estimate: DVector::from_column_slice(mu),
            cov: &l * l.transpose() * 0.01,
            basis: None,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn sequential_ratios_telescope(mu in prop::collection::vec(-5.0f64..5.0, 2..12), f in prop::collection::vec(-1.0f64..1.0, 8)) {
        let g = random_grid(&mu, &f, 1);
        let s = contrast(&g, "g0", &Sequential, None).unwrap();
        let total: f64 = s.estimate.iter().sum();
        prop_assert!((total - (mu[mu.len() - 1] - mu[0])).abs() < 1e-10);
    }

    #[test]
    fn effect_coding_is_centered(mu in prop::collection::vec(-5.0f64..5.0, 2..12), f in prop::collection::vec(-1.0f64..1.0, 8), pick in 0usize..1000) {
        let g = random_grid(&mu, &f, 1);
        let e = contrast(&g, "g0", &EffectCoding, None).unwrap();
        prop_assert!(e.estimate.iter().sum::<f64>().abs() < 1e-10);
        // Against a baseline subset the baseline rows are centered.
        let n = mu.len();
        let base: Vec<usize> = (0..n).filter(|i| (pick >> (i % 10)) & 1 == 1).collect();
        prop_assume!(!base.is_empty());
        let e = contrast(&g, "g0", &EffectCoding, Some(&base)).unwrap();
        let s: f64 = base.iter().map(|&b| e.estimate[b]).sum();
        prop_assert!(s.abs() < 1e-10);
    }

    #[test]
    fn quadratic_form_is_nonnegative(z in prop::collection::vec(-3.0f64..3.0, 3), f in prop::collection::vec(-2.0f64..2.0, 9)) {
        let l = DMatrix::from_row_slice(3, 3, &f);
        prop_assert!(quadratic_form(&z, &(&l * l.transpose())) >= -1e-12);
    }
}

proptest! {
    // Every case runs the lattice integration, so fewer cases.
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjusted_p_dominates_raw_p(mu in prop::collection::vec(-0.5f64..0.5, 4..9), f in prop::collection::vec(-1.0f64..1.0, 12)) {
        let g = random_grid(&mu, &f, 2);
        let a = contrast(&g, "g0", &Sequential, None).unwrap();
        let b = contrast(&g, "g1", &Sequential, None).unwrap();
        for fam in [a.clone(), did_estimate(&a, &b).unwrap(), contrast(&g, "g1", &EffectCoding, None).unwrap()] {
            prop_assume!(fam.cov.diagonal().iter().all(|v| *v > 1e-12));
            for e in summarize(&fam, ContrastKind::Sequential, 0.05) {
                prop_assert!(e.p_adjusted >= e.p_raw - 1e-12, "{} < {}", e.p_adjusted, e.p_raw);
                prop_assert!(e.ci_low <= e.ratio && e.ratio <= e.ci_high);
            }
        }
    }
}

#[test]
fn did_of_a_group_with_itself_is_one() {
    let g = random_grid(&[1.0, 2.0, 1.5, 0.5], &[0.3, -0.2, 0.9], 1);
    let s = contrast(&g, "g0", &Sequential, None).unwrap();
    let d = did_estimate(&s, &s).unwrap();
    assert!(d.estimate.iter().all(|v| *v == 0.0));
    for e in summarize(&d, ContrastKind::Did, 0.05) {
        assert_eq!(e.ratio, 1.0);
    }
}

#[test]
fn news_average_is_the_geometric_mean() {
    let g = random_grid(&[1.0, 2.0, 0.5, 0.25, 3.0, -1.0], &[0.4, 0.1, -0.3], 3);
    let avg = g.with_average("news", &["g0", "g1", "g2"]).unwrap();
    for e in 0..2 {
        let geo = (0..3).map(|k| g.log_emm.estimate[g.index(&format!("g{k}"), e).unwrap()].exp()).product::<f64>().cbrt();
        let got = avg.log_emm.estimate[avg.index("news", e).unwrap()].exp();
        assert!((got / geo - 1.0).abs() < 1e-12);
    }
    assert!(g.with_average("x", &[]).is_err());
}

#[test]
fn epoch_model_recovers_injected_did() {
    let cps = vec![56, 112];
    let did = vec![0.0, 0.0, 0.5];
    let t = truth(vec![Quality::Low, Quality::NonNews], cps.clone(), did, 17);
    let days = 168;
    let panel = generate_panel(&t, 24, days).unwrap();
    let window = StudyWindow::new(start(), start() + chrono::Days::new(days as u64)).unwrap();
    let part = EpochPartition::new(window, cps.iter().map(|&c| window.day(c)).collect()).unwrap();
    let frame = panel_frame(&panel.table, &panel.outlets, &window, Some(&part), Scope::NewsAndNonnews, 20).unwrap();
    assert!(frame.excluded.is_empty());
    let fit = fit_epoch_model(&frame, Scope::NewsAndNonnews, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    let s = summarize_epochs(&fit, &InferenceConfig::default()).unwrap();
    assert_eq!(s.epochs.len(), 3);
    let did = s.contrasts.iter().find(|c| c.kind == ContrastKind::Did).unwrap();
    let truth_log = [0.0, 0.5];
    for (e, t) in did.estimates.iter().zip(truth_log) {
        assert!((e.log_ratio - t).abs() < 3.0 * e.se_log, "{}: {} vs {t}", e.label, e.log_ratio);
        assert!(e.p_adjusted >= e.p_raw);
    }
    assert!(did.estimates[1].p_raw < 0.01);
    assert_eq!(s.parallel_trends_epochs, vec![1, 2]);
    assert!(s.parallel_trends.unwrap().p < 0.05);
}

#[test]
fn single_epoch_collapses_to_quality_model() {
    let t = truth(vec![Quality::Low, Quality::High], vec![], vec![], 5);
    let panel = generate_panel(&t, 12, 40).unwrap();
    let window = StudyWindow::new(start(), start() + chrono::Days::new(40)).unwrap();
    let part = EpochPartition::single(window);
    let frame = panel_frame(&panel.table, &panel.outlets, &window, Some(&part), Scope::NewsOnly, 20).unwrap();
    let spec = epoch_model_spec(Scope::NewsOnly, 1);
    assert!(!spec.mean.to_string().contains("epoch"));
    let fit = fit_epoch_model(&frame, Scope::NewsOnly, &FitOptions::default()).unwrap();
    assert!(fit.beta_names.iter().all(|n| !n.contains("epoch")));
    let s = summarize_epochs(&fit, &InferenceConfig::default()).unwrap();
    assert_eq!(s.epochs.len(), 1);
    assert!(s.contrasts.is_empty());
    assert!(s.parallel_trends.is_none());
}

#[test]
fn bad_inference_config_is_rejected() {
    let t = truth(vec![Quality::Low, Quality::NonNews], vec![30], vec![], 8);
    let panel = generate_panel(&t, 8, 60).unwrap();
    let window = StudyWindow::new(start(), start() + chrono::Days::new(60)).unwrap();
    let part = EpochPartition::new(window, vec![window.day(30)]).unwrap();
    let frame = panel_frame(&panel.table, &panel.outlets, &window, Some(&part), Scope::NewsAndNonnews, 20).unwrap();
    let spec = FormulaSpec::parse("quality*epoch + (1|outlet)", "1", Parametrization::Nb1Linear).unwrap();
    let fit = fit_nb_glmm(&frame.data, "reactions", &spec, &FitOptions::default()).unwrap();
    let bad = InferenceConfig { alpha: 1.5, ..Default::default() };
    assert!(summarize_epochs(&fit, &bad).is_err());
    let bad = InferenceConfig { baseline_epochs: Some(vec![7]), ..Default::default() };
    assert!(summarize_epochs(&fit, &bad).is_err());
    let bad = InferenceConfig { parallel_trends_epochs: Some(vec![0]), ..Default::default() };
    assert!(summarize_epochs(&fit, &bad).is_err());
    assert!(summarize_epochs(&fit, &InferenceConfig::default()).unwrap().parallel_trends.is_some());
}
