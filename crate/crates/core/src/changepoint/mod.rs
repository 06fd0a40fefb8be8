//! Bayesian changepoint detection on the weekly signal and the multi-run
//! consensus that turns per-run posteriors into point and interval estimates.

pub mod sampler;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epoch::EpochPartition;
use crate::error::{Error, Result};
use crate::signal::{StudyWindow, WeeklySignal};
use crate::synthetic::splitmix64;

pub use sampler::{sampler_registry, ChangepointSampler, PosteriorProbs, RjMcmc, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    /// Number of independent sampler runs.
    pub k: usize,
    /// Smoothing half-width in weeks.
    pub l: usize,
    /// Minimum averaged smoothed posterior of a reported peak.
    pub p_min: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self { k: 1000, l: 2, p_min: 0.5 }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("consensus needs at least one run".into()));
        }
        if !(self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(Error::Config(format!("p_min must lie in (0, 1], got {}", self.p_min)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Changepoint {
    pub index: usize,
    pub week: usize,
    pub timestamp: NaiveDate,
    pub lower_bound: usize,
    pub upper_bound: usize,
    pub lower_date: NaiveDate,
    pub upper_date: NaiveDate,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointSet {
    pub points: Vec<Changepoint>,
    /// Column average of the smoothed per-run posteriors.
    pub averaged: Vec<f64>,
    pub config: ConsensusConfig,
}

/// Probability of at least one changepoint within `l` weeks of each week,
/// truncating the window at the series ends.
pub fn smooth_posterior(p: &[f64], l: usize) -> Vec<f64> {
    let w = p.len();
    (0..w)
        .map(|j| {
            let lo = j.saturating_sub(l);
            let hi = (j + l).min(w.saturating_sub(1));
            // Multiplying in sorted order makes windows that cover the same
            // values bit-identical, so flat tops stay flat.
            let mut q: Vec<f64> = p[lo..=hi].iter().map(|v| 1.0 - v).collect();
            q.sort_by(f64::total_cmp);
            1.0 - q.iter().product::<f64>()
        })
        .collect()
}

/// Local maxima of `x` (plateaus reported at their middle, rounding down)
/// with height at least `min_height`, thinned so that kept peaks are more
/// than `2l` apart, higher peaks first.
pub fn find_peaks(x: &[f64], min_height: f64, l: usize) -> Vec<usize> {
    let w = x.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < w {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead + 1 < w && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                peaks.push((i + ahead - 1) / 2);
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    peaks.retain(|&p| x[p] >= min_height);
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    // Highest first; ties resolved towards the earlier peak.
    order.sort_by(|&a, &b| x[peaks[b]].total_cmp(&x[peaks[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; peaks.len()];
    for &a in &order {
        if !keep[a] {
            continue;
        }
        for (b, k) in keep.iter_mut().enumerate() {
            if b != a && peaks[a].abs_diff(peaks[b]) <= 2 * l {
                *k = false;
            }
        }
    }
    peaks.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
}

/// Smooths each run, averages over runs and reports the surviving peaks
/// with the contiguous region at or above half their height as interval.
pub fn consensus(runs: &[PosteriorProbs], cfg: &ConsensusConfig, window: &StudyWindow) -> Result<ChangepointSet> {
    if runs.is_empty() {
        return Err(Error::Config("consensus needs at least one run".into()));
    }
    if !(cfg.p_min > 0.0 && cfg.p_min <= 1.0) {
        return Err(Error::Config(format!("p_min must lie in (0, 1], got {}", cfg.p_min)));
    }
    let w = runs[0].probs.len();
    if let Some(bad) = runs.iter().find(|r| r.probs.len() != w) {
        return Err(Error::Domain(format!("run lengths differ: {} vs {w}", bad.probs.len())));
    }
    // Averaging in a fixed order keeps the result independent of run order
    // up to floating-point summation; sort each column for exact invariance.
    let smoothed: Vec<Vec<f64>> = runs.iter().map(|r| smooth_posterior(&r.probs, cfg.l)).collect();
    let averaged: Vec<f64> = (0..w)
        .map(|j| {
            let mut col: Vec<f64> = smoothed.iter().map(|s| s[j]).collect();
            col.sort_by(f64::total_cmp);
            col.iter().sum::<f64>() / runs.len() as f64
        })
        .collect();
    let points = find_peaks(&averaged, cfg.p_min, cfg.l)
        .into_iter()
        .enumerate()
        .map(|(index, week)| {
            let half = averaged[week] / 2.0;
            let mut lo = week;
            while lo > 0 && averaged[lo - 1] >= half {
                lo -= 1;
            }
            let mut hi = week;
            while hi + 1 < w && averaged[hi + 1] >= half {
                hi += 1;
            }
            Changepoint {
                index,
                week,
                timestamp: window.week_start(week),
                lower_bound: lo,
                upper_bound: hi,
                lower_date: window.week_start(lo),
                upper_date: window.week_start(hi),
                height: averaged[week],
            }
        })
        .collect();
    Ok(ChangepointSet { points, averaged, config: cfg.clone() })
}

/// Runs `cfg.k` independent chains with seeds derived from `sampler_cfg.seed`
/// (chain `i` uses `splitmix64(seed ^ splitmix64(i + 1))`), in parallel.
pub fn run_many(
    sampler: &dyn ChangepointSampler,
    signal: &[WeeklySignal],
    sampler_cfg: &SamplerConfig,
    k: usize,
) -> Result<Vec<PosteriorProbs>> {
    sampler_cfg.validate()?;
    (0..k)
        .into_par_iter()
        .map(|i| {
            let mut c = sampler_cfg.clone();
            c.seed = splitmix64(sampler_cfg.seed ^ splitmix64(i as u64 + 1));
            sampler.run(signal, &c)
        })
        .collect()
}

/// Epochs delimited by the start dates of the weeks holding changepoints.
pub fn partition_epochs(cps: &ChangepointSet, window: &StudyWindow) -> Result<EpochPartition> {
    EpochPartition::new(*window, cps.points.iter().map(|p| window.week_start(p.week)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(weeks: u64) -> StudyWindow {
        let s = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
        StudyWindow::new(s, s + chrono::Days::new(7 * weeks)).unwrap()
    }

    #[test]
    fn smoothing_by_hand() {
        let s = smooth_posterior(&[0.0, 0.3, 0.0, 0.0, 0.0], 2);
        for (a, b) in s.iter().zip([0.3, 0.3, 0.3, 0.3, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let s = smooth_posterior(&[0.5, 0.5, 0.0], 1);
        assert!((s[0] - 0.75).abs() < 1e-15 && (s[2] - 0.5).abs() < 1e-15);
        assert!(smooth_posterior(&[0.0; 6], 2).iter().all(|&v| v == 0.0));
        let s = smooth_posterior(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 2);
        assert_eq!(s, vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn identical_runs_give_one_point() {
        let mut p = vec![0.0; 100];
        p[50] = 0.9;
        let runs = vec![PosteriorProbs::new(p); 5];
        let cps = consensus(&runs, &ConsensusConfig { k: 5, l: 2, p_min: 0.5 }, &window(100)).unwrap();
        assert_eq!(cps.points.len(), 1);
        assert_eq!(cps.points[0].week, 50);
        assert_eq!((cps.points[0].lower_bound, cps.points[0].upper_bound), (48, 52));
    }

    #[test]
    fn closer_than_two_l_keeps_the_higher_peak() {
        let mut x = vec![0.0; 20];
        x[8] = 0.6;
        x[11] = 0.7;
        assert_eq!(find_peaks(&x, 0.5, 2), vec![11]);
        assert_eq!(find_peaks(&x, 0.5, 1), vec![8, 11]);
    }

    #[test]
    fn consensus_rejects_bad_input() {
        let w = window(10);
        assert!(consensus(&[], &ConsensusConfig::default(), &w).is_err());
        let runs = vec![PosteriorProbs::new(vec![0.0; 10]), PosteriorProbs::new(vec![0.0; 9])];
        assert!(consensus(&runs, &ConsensusConfig::default(), &w).is_err());
    }

    #[test]
    fn epochs_from_points() {
        let w = window(60);
        let mut p = vec![0.0; 60];
        p[20] = 1.0;
        p[40] = 1.0;
        let cps = consensus(&[PosteriorProbs::new(p)], &ConsensusConfig { k: 1, l: 2, p_min: 0.5 }, &w).unwrap();
        let part = partition_epochs(&cps, &w).unwrap();
        assert_eq!(part.n_epochs(), 3);
        assert_eq!(part.epoch_of(w.week_start(20)), Some(1));
        assert_eq!(part.epoch_of(w.week_start(20) - chrono::Days::new(1)), Some(0));
    }
}
