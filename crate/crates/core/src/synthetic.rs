//! Synthetic panels and signals with known ground truth.
//!
//! Every random stream is a ChaCha8 generator seeded with
//! `splitmix64(seed ^ splitmix64(stream))`, where `stream` is 0 for shared
//! day effects and `1 + k` for outlet `k`. Outlets can therefore be generated
//! independently and in any order.

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{family_for, Parametrization};
use crate::ingest::{ImputeFlag, OutletMeta, PostRecord, PostTable, PostType, Quality, Sector, Source};
use crate::signal::WeeklySignal;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).map(|d| d.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda > 0.0 {
        Poisson::new(lambda).map(|d| d.sample(rng) as u64).unwrap_or(0)
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelTruth {
    pub start: NaiveDate,
    /// Day offsets at which epochs 1, 2, ... begin.
    pub changepoints: Vec<usize>,
    /// Quality tier of each group; outlet `k` belongs to group `k % groups.len()`.
    pub groups: Vec<Quality>,
    /// Log mean reactions per post, `[group][epoch]`, before the effects below.
    pub log_mean: Vec<Vec<f64>>,
    /// Log-scale effect added to news groups in each epoch (empty for none).
    pub did_log: Vec<f64>,
    pub sd_outlet: f64,
    pub sd_outlet_epoch: f64,
    pub sd_day: f64,
    pub parametrization: Parametrization,
    pub phi: f64,
    pub posts_per_day: f64,
    /// Log-normal SD of outlet posting-rate multipliers.
    pub rate_sd: f64,
    /// Views per reaction; 0 disables views.
    pub views_per_reaction: f64,
    pub seed: u64,
}

impl PanelTruth {
    pub fn n_epochs(&self) -> usize {
        self.changepoints.len() + 1
    }

    pub fn epoch_of_day(&self, day: usize) -> usize {
        self.changepoints.iter().take_while(|&&c| c <= day).count()
    }

    /// True log mean for a post of `group` in `epoch`, with zero random effects.
    pub fn fixed_log_mean(&self, group: usize, epoch: usize) -> f64 {
        let news = self.groups[group] != Quality::NonNews;
        self.log_mean[group][epoch] + if news { self.did_log.get(epoch).copied().unwrap_or(0.0) } else { 0.0 }
    }

    fn validate(&self, n_outlets: usize, days: usize) -> Result<()> {
        if n_outlets < 2 {
            return Err(Error::Config("need at least 2 outlets".into()));
        }
        if self.groups.is_empty() || self.log_mean.len() != self.groups.len() {
            return Err(Error::Config("log_mean needs one row per group".into()));
        }
        if self.log_mean.iter().any(|r| r.len() != self.n_epochs()) {
            return Err(Error::Config("log_mean needs one column per epoch".into()));
        }
        let mut prev = 0;
        for &c in &self.changepoints {
            if c <= prev || c >= days {
                return Err(Error::Config(format!("epoch starting at day {c} has no days")));
            }
            prev = c;
        }
        if [self.sd_outlet, self.sd_outlet_epoch, self.sd_day, self.rate_sd].iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("standard deviations must be nonnegative".into()));
        }
        if !(self.phi > 0.0) || !(self.posts_per_day > 0.0) {
            return Err(Error::Config("phi and posts_per_day must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub table: PostTable,
    pub outlets: Vec<OutletMeta>,
    pub truth: PanelTruth,
    pub outlet_effects: Vec<f64>,
    pub day_effects: Vec<f64>,
}

/// Draws a post table from `truth` for `n_outlets` outlets over `days` days.
pub fn generate_panel(truth: &PanelTruth, n_outlets: usize, days: usize) -> Result<SyntheticPanel> {
    truth.validate(n_outlets, days)?;
    let family = family_for(truth.parametrization)?;
    let mut day_rng = stream_rng(truth.seed, 0);
    let day_effects: Vec<f64> = (0..days).map(|_| normal(&mut day_rng, truth.sd_day)).collect();
    let n_epochs = truth.n_epochs();

    let per_outlet: Vec<(Vec<PostRecord>, OutletMeta, f64)> = (0..n_outlets)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(truth.seed, 1 + k as u64);
            let group = k % truth.groups.len();
            let quality = truth.groups[group];
            let b_outlet = normal(&mut rng, truth.sd_outlet);
            let b_epoch: Vec<f64> = (0..n_epochs).map(|_| normal(&mut rng, truth.sd_outlet_epoch)).collect();
            let rate = truth.posts_per_day * normal(&mut rng, truth.rate_sd).exp();
            let outlet_id = format!("o{k:03}");
            let mut posts = Vec::new();
            for day in 0..days {
                let epoch = truth.epoch_of_day(day);
                let n = poisson(&mut rng, rate);
                let log_mu = truth.fixed_log_mean(group, epoch) + b_outlet + b_epoch[epoch] + day_effects[day];
                let mu = log_mu.exp();
                let date = truth.start + Duration::days(day as i64);
                for j in 0..n {
                    let y = family.sample(&mut rng, mu, truth.phi);
                    let secs = rng.random_range(0..86_400);
                    let post_type = match rng.random_range(0..10) {
                        0 | 1 => PostType::Video,
                        2..=4 => PostType::Photo,
                        _ => PostType::Link,
                    };
                    let views = (truth.views_per_reaction > 0.0).then(|| {
                        let a = truth.views_per_reaction;
                        let noise = normal(&mut rng, a * ((y as f64) + 1.0).sqrt());
                        (a * y as f64 + noise).round().max(0.0) as u64
                    });
                    let comments = poisson(&mut rng, 0.05 * y as f64 + 0.5);
                    let published_at = date.and_hms_opt(0, 0, 0).expect("midnight").and_utc() + Duration::seconds(secs);
                    posts.push(PostRecord {
                        post_id: format!("{outlet_id}-{day:05}-{j}"),
                        outlet_id: outlet_id.clone(),
                        published_at,
                        post_type,
                        author_is_page: true,
                        text: format!("{outlet_id} story {day} {j}"),
                        reactions: Some(y),
                        comments: Some(comments),
                        views,
                        source: Source::PrimaryFeed,
                        imputed_flag: ImputeFlag::Observed,
                    });
                }
            }
            let mean_posts = (posts.len() as f64 / days as f64).max(1.0 / days as f64);
            let meta = OutletMeta {
                outlet_id: outlet_id.clone(),
                name: format!("Outlet {k}"),
                sector: if quality == Quality::NonNews { Sector::NonNews } else { Sector::News },
                quality,
                mean_posts,
            };
            (posts, meta, b_outlet)
        })
        .collect();

    let mut records = Vec::new();
    let mut outlets = Vec::new();
    let mut outlet_effects = Vec::new();
    for (posts, meta, b) in per_outlet {
        records.extend(posts);
        outlets.push(meta);
        outlet_effects.push(b);
    }
    Ok(SyntheticPanel { table: PostTable::new(records), outlets, truth: truth.clone(), outlet_effects, day_effects })
}

/// One segment of a piecewise signal: a level and a per-year slope for each
/// of the two dimensions (slope 0 gives an order-0 segment).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub level: [f64; 2],
    pub slope: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSpec {
    pub start: NaiveDate,
    pub weeks: usize,
    /// Week indices at which segments 1, 2, ... begin.
    pub changepoints: Vec<usize>,
    pub segments: Vec<SegmentSpec>,
    pub noise_sd: [f64; 2],
    /// `(week, shift in noise SDs)` spikes added to both dimensions.
    pub outliers: Vec<(usize, f64)>,
    pub min_separation: usize,
    pub seed: u64,
}

/// Noise-free value of dimension `d` at week `t`.
pub fn piecewise_mean(spec: &PiecewiseSpec, d: usize, t: usize) -> f64 {
    let s = spec.changepoints.iter().take_while(|&&c| c <= t).count();
    let seg_start = if s == 0 { 0 } else { spec.changepoints[s - 1] };
    let seg = &spec.segments[s];
    seg.level[d] + seg.slope[d] * (t - seg_start) as f64 / 52.0
}

/// Piecewise-linear two-dimensional signal with shared breaks plus noise.
pub fn generate_piecewise_signal(spec: &PiecewiseSpec) -> Result<Vec<WeeklySignal>> {
    if spec.segments.len() != spec.changepoints.len() + 1 {
        return Err(Error::Config("need one segment more than changepoints".into()));
    }
    let mut prev = 0usize;
    for (i, &c) in spec.changepoints.iter().enumerate() {
        let gap = if i == 0 { c } else { c.saturating_sub(prev) };
        if c >= spec.weeks || (i > 0 && c <= prev) || gap < spec.min_separation {
            return Err(Error::Config(format!(
                "changepoint at week {c} violates the minimum separation of {}",
                spec.min_separation
            )));
        }
        prev = c;
    }
    let mut rng = stream_rng(spec.seed, 0);
    Ok((0..spec.weeks)
        .map(|t| {
            let mut v = [0.0; 2];
            for (d, vd) in v.iter_mut().enumerate() {
                *vd = piecewise_mean(spec, d, t) + normal(&mut rng, spec.noise_sd[d]);
                for &(w, k) in &spec.outliers {
                    if w == t {
                        *vd += k * spec.noise_sd[d];
                    }
                }
            }
            WeeklySignal {
                week_index: t,
                week_start: spec.start + Duration::days(7 * t as i64),
                log_rel_mean: Some(v[0]),
                log_cv: Some(v[1]),
                n_outlets: 1,
            }
        })
        .collect())
}

/// One group of a synthetic log-posts / log-reactions weekly series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ar1GroupSpec {
    pub group: String,
    pub intercept: f64,
    pub slope: f64,
    /// Marginal SD of the AR(1) errors.
    pub sigma: f64,
    /// Mean and marginal SD of log posts, which follow their own AR(1) with
    /// coefficient `x_phi`.
    pub x_mean: f64,
    pub x_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ar1Spec {
    pub groups: Vec<Ar1GroupSpec>,
    pub phi_ar: f64,
    pub x_phi: f64,
    pub len: usize,
    pub seed: u64,
}

/// Stationary AR(1) path with marginal SD `sd`, started from the stationary law.
pub fn ar1_path(rng: &mut ChaCha8Rng, len: usize, phi: f64, sd: f64) -> Vec<f64> {
    let innov = sd * (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(len);
    let mut e = normal(rng, sd);
    for _ in 0..len {
        out.push(e);
        e = phi * e + normal(rng, innov);
    }
    out
}

/// Group `k` draws from its own stream, so adding groups leaves earlier ones intact.
pub fn generate_ar1_series(spec: &Ar1Spec) -> Result<Vec<crate::ar1::Ar1Series>> {
    if !(spec.phi_ar.abs() < 1.0 && spec.x_phi.abs() < 1.0) {
        return Err(Error::Config("AR(1) coefficients must lie in (-1, 1)".into()));
    }
    Ok(spec
        .groups
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let mut rng = stream_rng(spec.seed, k as u64 + 1);
            let x: Vec<f64> = ar1_path(&mut rng, spec.len, spec.x_phi, g.x_sd).iter().map(|v| g.x_mean + v).collect();
            let e = ar1_path(&mut rng, spec.len, spec.phi_ar, g.sigma);
            crate::ar1::Ar1Series {
                group: g.group.clone(),
                time: (0..spec.len as i64).collect(),
                log_y: x.iter().zip(&e).map(|(xi, ei)| g.intercept + g.slope * xi + ei).collect(),
                log_x: x,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_truth() -> PanelTruth {
        PanelTruth {
            start: NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(),
            changepoints: vec![10],
            groups: vec![Quality::Low, Quality::High],
            log_mean: vec![vec![2.0, 1.5], vec![3.0, 2.0]],
            did_log: vec![],
            sd_outlet: 0.5,
            sd_outlet_epoch: 0.0,
            sd_day: 0.1,
            parametrization: Parametrization::Nb1Linear,
            phi: 2.0,
            posts_per_day: 2.0,
            rate_sd: 0.2,
            views_per_reaction: 50.0,
            seed: 7,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_panel(&small_truth(), 4, 20).unwrap();
        let b = generate_panel(&small_truth(), 4, 20).unwrap();
        assert_eq!(a.table, b.table);
        let mut other = small_truth();
        other.seed = 8;
        assert_ne!(generate_panel(&other, 4, 20).unwrap().table, a.table);
    }

    #[test]
    fn empty_epoch_is_rejected() {
        let mut t = small_truth();
        t.changepoints = vec![25];
        assert!(generate_panel(&t, 4, 20).is_err());
    }

    #[test]
    fn piecewise_without_noise_is_exact() {
        let spec = PiecewiseSpec {
            start: NaiveDate::from_ymd_opt(2020, 1, 6).unwrap(),
            weeks: 40,
            changepoints: vec![],
            segments: vec![SegmentSpec { level: [1.0, -1.0], slope: [0.0, 0.0] }],
            noise_sd: [0.0, 0.0],
            outliers: vec![],
            min_separation: 13,
            seed: 1,
        };
        let s = generate_piecewise_signal(&spec).unwrap();
        assert!(s.iter().all(|w| w.log_rel_mean == Some(1.0) && w.log_cv == Some(-1.0)));
        let bad = PiecewiseSpec { changepoints: vec![5], segments: vec![spec.segments[0]; 2], ..spec };
        assert!(generate_piecewise_signal(&bad).is_err());
    }
}
