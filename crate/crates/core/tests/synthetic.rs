use std::collections::{BTreeMap, HashSet};

use chrono::NaiveDate;
use engshift_core::family::Parametrization;
use engshift_core::ingest::Quality;
use engshift_core::ols::ols;
use engshift_core::synthetic::*;

fn truth(parametrization: Parametrization, phi: f64) -> PanelTruth {
    PanelTruth {
        start: NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(),
        changepoints: vec![30],
        groups: vec![Quality::Low, Quality::High],
        log_mean: vec![vec![5f64.ln(), 50f64.ln()], vec![500f64.ln(), 2f64.ln()]],
        did_log: vec![],
        sd_outlet: 0.0,
        sd_outlet_epoch: 0.0,
        sd_day: 0.0,
        parametrization,
        phi,
        posts_per_day: 40.0,
        rate_sd: 0.0,
        views_per_reaction: 0.0,
        seed: 3,
    }
}

/// Sample mean and variance of reactions per (group, epoch) cell.
fn cell_moments(p: &SyntheticPanel) -> BTreeMap<(usize, usize), (f64, f64, usize)> {
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in &p.table.records {
        let k: usize = r.outlet_id[1..].parse().unwrap();
        let day = (r.published_at.date_naive() - p.truth.start).num_days() as usize;
        cells.entry((k % p.truth.groups.len(), p.truth.epoch_of_day(day))).or_default().push(r.reactions.unwrap() as f64);
    }
    cells
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (k, (m, var, v.len()))
        })
        .collect()
}

#[test]
fn poisson_limit_matches_fixed_effects() {
    let p = generate_panel(&truth(Parametrization::Nb1Linear, 1e-9), 4, 60).unwrap();
    for ((g, e), (m, _, n)) in cell_moments(&p) {
        let mu = p.truth.fixed_log_mean(g, e).exp();
        let se = (mu / n as f64).sqrt();
        assert!((m - mu).abs() < 3.0 * se, "cell ({g},{e}): {m} vs {mu} (se {se})");
    }
}

#[test]
fn variance_mean_relationship_follows_parametrization() {
    let phi = 2.0;
    for par in [Parametrization::Nb1Linear, Parametrization::Nb2Quadratic] {
        let p = generate_panel(&truth(par, phi), 4, 120).unwrap();
        for ((g, e), (m, var, n)) in cell_moments(&p) {
            let mu = p.truth.fixed_log_mean(g, e).exp();
            let expected = match par {
                Parametrization::Nb1Linear => mu * (1.0 + phi),
                _ => mu + mu * mu / phi,
            };
            // The sample variance of a heavy-tailed count has a wide spread,
            // so allow 25%; the two laws differ by far more at these means.
            assert!((var / expected - 1.0).abs() < 0.25, "{par:?} ({g},{e}) n={n}: {var} vs {expected}, mean {m}");
        }
    }
}

#[test]
fn outlet_spread_matches_sd() {
    let mut t = truth(Parametrization::Nb1Linear, 0.5);
    t.changepoints = vec![];
    t.groups = vec![Quality::Medium];
    t.log_mean = vec![vec![3.0]];
    t.sd_outlet = 1.1;
    t.posts_per_day = 10.0;
    let p = generate_panel(&t, 300, 30).unwrap();
    let mut by_outlet: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in &p.table.records {
        let e = by_outlet.entry(r.outlet_id.as_str()).or_default();
        e.0 += r.reactions.unwrap() as f64;
        e.1 += 1;
    }
    let logs: Vec<f64> = by_outlet.values().map(|(s, n)| (s / *n as f64).max(0.05).ln()).collect();
    let m = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (logs.len() - 1) as f64).sqrt();
    assert!((sd / 1.1 - 1.0).abs() < 0.15, "spread {sd}");
}

#[test]
fn records_satisfy_invariants_and_are_reproducible() {
    let mut t = truth(Parametrization::Nb1Linear, 1.0);
    t.sd_outlet = 0.5;
    t.sd_day = 0.2;
    t.rate_sd = 0.3;
    t.views_per_reaction = 30.0;
    let a = generate_panel(&t, 6, 40).unwrap();
    let b = generate_panel(&t, 6, 40).unwrap();
    assert_eq!(a.table, b.table);
    let ids: HashSet<&str> = a.table.records.iter().map(|r| r.post_id.as_str()).collect();
    assert_eq!(ids.len(), a.table.len());
    let end = t.start + chrono::Duration::days(40);
    assert!(a.table.records.iter().all(|r| {
        let d = r.published_at.date_naive();
        d >= t.start && d < end && r.author_is_page && r.views.is_some()
    }));
    assert!(a.outlets.iter().all(|o| o.validate().is_ok()));
    let json = serde_json::to_string(&a.truth).unwrap();
    assert_eq!(serde_json::from_str::<PanelTruth>(&json).unwrap(), t);
}

#[test]
fn infeasible_configs_are_rejected() {
    let t = truth(Parametrization::Nb1Linear, 1.0);
    assert!(generate_panel(&t, 1, 60).is_err());
    assert!(generate_panel(&t, 4, 30).is_err());
    let mut bad = t.clone();
    bad.sd_day = -1.0;
    assert!(generate_panel(&bad, 4, 60).is_err());
}

fn three_break_spec(noise: f64) -> PiecewiseSpec {
    PiecewiseSpec {
        start: NaiveDate::from_ymd_opt(2016, 1, 4).unwrap(),
        weeks: 120,
        changepoints: vec![30, 60, 95],
        segments: [0.0, 1.0, -0.5, 2.0].iter().map(|&l| SegmentSpec { level: [l, -l], slope: [0.0, 0.0] }).collect(),
        noise_sd: [noise, 2.0 * noise],
        outliers: vec![],
        min_separation: 13,
        seed: 9,
    }
}

#[test]
fn segment_means_recovered_given_true_breaks() {
    let spec = three_break_spec(0.2);
    let s = generate_piecewise_signal(&spec).unwrap();
    let seg = |t: usize| spec.changepoints.iter().filter(|&&c| c <= t).count();
    let x: Vec<f64> = (0..spec.weeks).flat_map(|t| (0..4).map(move |j| f64::from(u8::from(seg(t) == j)))).collect();
    for d in 0..2 {
        let y: Vec<f64> = s.iter().map(|w| if d == 0 { w.log_rel_mean.unwrap() } else { w.log_cv.unwrap() }).collect();
        let fit = ols(&x, 4, &y).unwrap();
        for j in 0..4 {
            let truth = spec.segments[j].level[d];
            assert!((fit.coef[j] - truth).abs() < 4.0 * fit.se[j], "dim {d} seg {j}: {} vs {truth}", fit.coef[j]);
        }
        let distinct: HashSet<i64> = fit.coef.iter().map(|c| (c * 2.0).round() as i64).collect();
        assert_eq!(distinct.len(), 4);
    }
}

#[test]
fn injected_outlier_stands_out() {
    let mut spec = three_break_spec(0.1);
    spec.outliers = vec![(7, 8.0)];
    let s = generate_piecewise_signal(&spec).unwrap();
    for d in 0..2 {
        let v = if d == 0 { s[7].log_rel_mean } else { s[7].log_cv }.unwrap();
        assert!((v - piecewise_mean(&spec, d, 7)).abs() > 5.0 * spec.noise_sd[d]);
    }
}

#[test]
fn ar1_generator_is_stationary() {
    let mut rng = stream_rng(4, 0);
    let x = ar1_path(&mut rng, 20_000, 0.8, 2.0);
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    assert!(m.abs() < 0.15);
    assert!((sd - 2.0).abs() < 0.1);
}
