use chrono::NaiveDate;
use engshift_core::changepoint::{
    consensus, find_peaks, run_many, sampler_registry, smooth_posterior, ConsensusConfig, PosteriorProbs, RjMcmc,
    SamplerConfig, ChangepointSampler,
};
use engshift_core::signal::{StudyWindow, WeeklySignal};
use engshift_core::synthetic::{generate_piecewise_signal, PiecewiseSpec, SegmentSpec};
use engshift_core::Error;
use proptest::prelude::*;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2016, 1, 4).unwrap()
}

fn spec(weeks: usize, changepoints: Vec<usize>, levels: &[f64], seed: u64) -> PiecewiseSpec {
    PiecewiseSpec {
        start: start(),
        weeks,
        changepoints,
        segments: levels.iter().map(|&l| SegmentSpec { level: [l, -0.5 * l], slope: [0.0, 0.0] }).collect(),
        noise_sd: [1.0, 1.0],
        outliers: vec![],
        min_separation: 13,
        seed,
    }
}

fn quick() -> SamplerConfig {
    SamplerConfig { seed: 9, ..Default::default() }
}

#[test]
fn flat_signal_has_low_posterior() {
    let s = generate_piecewise_signal(&spec(300, vec![], &[0.0], 1)).unwrap();
    let p = RjMcmc::default().run(&s, &quick()).unwrap();
    let max = p.probs.iter().cloned().fold(0.0, f64::max);
    assert!(max < 0.2, "max posterior {max}");
}

#[test]
fn single_shift_is_located() {
    let s = generate_piecewise_signal(&spec(300, vec![100], &[0.0, 5.0], 2)).unwrap();
    let p = RjMcmc::default().run(&s, &quick()).unwrap();
    let mass: f64 = p.probs[98..=102].iter().sum();
    assert!(mass >= 0.8, "mass near 100: {mass}");
    assert!(p.knot_count.len() == 31);
}

#[test]
fn close_changepoints_are_never_both_placed() {
    let mut sp = spec(200, vec![80], &[0.0, 5.0], 3);
    sp.outliers = vec![];
    let mut s = generate_piecewise_signal(&sp).unwrap();
    // Second shift 10 weeks later, which the separation rule forbids to fit separately.
    for w in s.iter_mut().skip(90) {
        w.log_rel_mean = w.log_rel_mean.map(|v| v + 5.0);
        w.log_cv = w.log_cv.map(|v| v - 2.5);
    }
    let p = RjMcmc::default().run(&s, &quick()).unwrap();
    assert!(p.min_knot_gap.is_none_or(|g| g >= 13), "{:?}", p.min_knot_gap);
    assert!(p.probs[80..=92].iter().sum::<f64>() <= 1.0 + 1e-12);
}

#[test]
fn reproducible_for_a_seed() {
    let s = generate_piecewise_signal(&spec(120, vec![60], &[0.0, 3.0], 4)).unwrap();
    let a = RjMcmc::default().run(&s, &quick()).unwrap();
    let b = RjMcmc::default().run(&s, &quick()).unwrap();
    assert_eq!(a, b);
    let c = RjMcmc::default().run(&s, &SamplerConfig { seed: 10, ..quick() }).unwrap();
    assert_ne!(a.probs, c.probs);
}

#[test]
fn short_or_missing_signals_are_rejected() {
    let s = generate_piecewise_signal(&spec(10, vec![], &[0.0], 5)).unwrap();
    match RjMcmc::default().run(&s, &quick()) {
        Err(Error::SignalTooShort { len: 10, required: 26 }) => {}
        other => panic!("{other:?}"),
    }
    let mut s = generate_piecewise_signal(&spec(40, vec![], &[0.0], 5)).unwrap();
    s.iter_mut().for_each(|w| w.log_cv = None);
    assert!(RjMcmc::default().run(&s, &quick()).is_err());
}

#[test]
fn missing_weeks_are_skipped() {
    let mut s = generate_piecewise_signal(&spec(150, vec![75], &[0.0, 5.0], 6)).unwrap();
    for w in s.iter_mut().skip(20).take(30) {
        w.log_rel_mean = None;
        w.log_cv = None;
    }
    let p = RjMcmc::default().run(&s, &quick()).unwrap();
    assert!(p.probs[21..49].iter().all(|&v| v == 0.0));
    assert!(p.probs[73..=77].iter().sum::<f64>() > 0.8);
}

#[test]
fn registry_and_parallel_runs() {
    let sampler = sampler_registry().get("rjmcmc").unwrap();
    let s = generate_piecewise_signal(&spec(100, vec![50], &[0.0, 4.0], 7)).unwrap();
    let cfg = SamplerConfig { mcmc: engshift_core::changepoint::sampler::McmcConfig { burn_in: 200, samples: 300, thinning: 2 }, ..quick() };
    let runs = run_many(sampler.as_ref(), &s, &cfg, 4).unwrap();
    assert_eq!(runs.len(), 4);
    assert_ne!(runs[0].probs, runs[1].probs);
    assert_eq!(runs, run_many(sampler.as_ref(), &s, &cfg, 4).unwrap());
}

fn window(weeks: usize) -> StudyWindow {
    StudyWindow::new(start(), start() + chrono::Days::new(7 * weeks as u64)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn consensus_outputs_respect_height_and_separation(
        p in prop::collection::vec(0.0f64..=1.0, 5..80),
        l in 0usize..4,
        p_min in 0.05f64..=1.0,
    ) {
        let w = p.len();
        let cfg = ConsensusConfig { k: 1, l, p_min };
        let cps = consensus(&[PosteriorProbs::new(p.clone())], &cfg, &window(w)).unwrap();
        for pt in &cps.points {
            prop_assert!(pt.height >= p_min);
            prop_assert!(pt.lower_bound <= pt.week && pt.week <= pt.upper_bound);
        }
        for pair in cps.points.windows(2) {
            prop_assert!(pair[1].week > pair[0].week + 2 * l);
        }
        let s = smooth_posterior(&p, l);
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(find_peaks(&cps.averaged, p_min, l), cps.points.iter().map(|c| c.week).collect::<Vec<_>>());
    }

    #[test]
    fn smoothing_is_monotone(p in prop::collection::vec(0.0f64..=1.0, 1..40), idx in 0usize..40, bump in 0.0f64..=1.0, l in 0usize..4) {
        let i = idx % p.len();
        let mut q = p.clone();
        q[i] = (q[i] + bump).min(1.0);
        let a = smooth_posterior(&p, l);
        let b = smooth_posterior(&q, l);
        prop_assert!(a.iter().zip(&b).all(|(x, y)| *y >= *x - 1e-15));
    }

    #[test]
    fn consensus_ignores_run_order(runs in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 30), 1..6)) {
        let probs: Vec<PosteriorProbs> = runs.iter().cloned().map(PosteriorProbs::new).collect();
        let mut rev = probs.clone();
        rev.reverse();
        let cfg = ConsensusConfig { k: probs.len(), l: 2, p_min: 0.3 };
        let a = consensus(&probs, &cfg, &window(30)).unwrap();
        let b = consensus(&rev, &cfg, &window(30)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn signal_helpers_roundtrip() {
    let s: Vec<WeeklySignal> = generate_piecewise_signal(&spec(30, vec![15], &[0.0, 1.0], 8)).unwrap();
    let mut buf = Vec::new();
    engshift_core::signal::write_signal(&mut buf, &s).unwrap();
    assert_eq!(engshift_core::signal::read_signal(&buf[..]).unwrap(), s);
}
