//! Weekly two-dimensional log signal built from outlet-day conditional moments.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open calendar window `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl StudyWindow {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end <= start {
            return Err(Error::Config(format!("empty study window {start}..{end}")));
        }
        Ok(Self { start, end })
    }

    pub fn n_days(&self) -> usize {
        (self.end - self.start).num_days() as usize
    }

    pub fn n_weeks(&self) -> usize {
        self.n_days().div_ceil(7)
    }

    pub fn contains(&self, day: NaiveDate) -> bool {
        day >= self.start && day < self.end
    }

    /// 7-day block index anchored at the window start.
    pub fn week_of(&self, day: NaiveDate) -> Option<usize> {
        self.contains(day).then(|| (day - self.start).num_days() as usize / 7)
    }

    pub fn week_start(&self, week: usize) -> NaiveDate {
        self.start + chrono::Days::new(7 * week as u64)
    }

    pub fn day(&self, offset: usize) -> NaiveDate {
        self.start + chrono::Days::new(offset as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutletDayMoments {
    pub outlet_id: String,
    pub day: NaiveDate,
    pub mu: f64,
    pub sigma: f64,
    pub outlet_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklySignal {
    pub week_index: usize,
    pub week_start: NaiveDate,
    /// `None` for weeks without any contributing outlet.
    pub log_rel_mean: Option<f64>,
    pub log_cv: Option<f64>,
    pub n_outlets: usize,
}

impl WeeklySignal {
    pub fn is_missing(&self) -> bool {
        self.log_rel_mean.is_none() || self.log_cv.is_none()
    }
}

/// `mu / outlet_mean`.
pub fn relative_mean(mu: f64, outlet_mean: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) || !(outlet_mean > 0.0 && outlet_mean.is_finite()) {
        return Err(Error::Domain(format!("relative mean needs positive inputs, got ({mu}, {outlet_mean})")));
    }
    Ok(mu / outlet_mean)
}

/// `sigma / mu`.
pub fn coefficient_of_variation(sigma: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("coefficient of variation needs mu > 0 and sigma >= 0, got ({sigma}, {mu})")));
    }
    Ok(sigma / mu)
}

/// Outlet-week means of the relative mean and the coefficient of variation,
/// averaged with equal weight over outlets, then log-transformed.
pub fn build_weekly_signal(moments: &[OutletDayMoments], window: &StudyWindow) -> Result<Vec<WeeklySignal>> {
    // (outlet, week) -> daily (rel, cv) values
    let mut cells: BTreeMap<(&str, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for m in moments {
        let week = window.week_of(m.day).ok_or_else(|| {
            Error::Domain(format!("outlet {} day {} lies outside the study window", m.outlet_id, m.day))
        })?;
        let c = cells.entry((m.outlet_id.as_str(), week)).or_default();
        c.0.push(relative_mean(m.mu, m.outlet_mean)?);
        c.1.push(coefficient_of_variation(m.sigma, m.mu)?);
    }
    // Sorting before summing makes the result independent of input order.
    let mean = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / v.len() as f64
    };
    let w = window.n_weeks();
    let mut agg = vec![(0.0, 0.0, 0usize); w];
    // BTreeMap order fixes the summation order across outlets.
    for ((_, week), (rel, cv)) in cells {
        agg[week].0 += mean(rel);
        agg[week].1 += mean(cv);
        agg[week].2 += 1;
    }
    Ok(agg
        .into_iter()
        .enumerate()
        .map(|(week, (rel, cv, n))| {
            let (lr, lc) = if n > 0 { (Some((rel / n as f64).ln()), Some((cv / n as f64).ln())) } else { (None, None) };
            WeeklySignal { week_index: week, week_start: window.week_start(week), log_rel_mean: lr, log_cv: lc, n_outlets: n }
        })
        .collect())
}

pub fn write_signal<W: Write>(writer: W, signal: &[WeeklySignal]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["week_index", "week_start", "log_rel_mean", "log_cv", "n_outlets"])?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for s in signal {
        w.write_record([
            s.week_index.to_string(),
            s.week_start.to_string(),
            f(s.log_rel_mean),
            f(s.log_cv),
            s.n_outlets.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signal<R: Read>(reader: R) -> Result<Vec<WeeklySignal>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let parse_opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Schema(format!("bad signal value `{s}`")))
            }
        };
        let week_index: usize = row[0].parse().map_err(|_| Error::Schema(format!("bad week index `{}`", &row[0])))?;
        let week_start =
            NaiveDate::parse_from_str(&row[1], "%Y-%m-%d").map_err(|_| Error::Schema(format!("bad date `{}`", &row[1])))?;
        out.push(WeeklySignal {
            week_index,
            week_start,
            log_rel_mean: parse_opt(&row[2])?,
            log_cv: parse_opt(&row[3])?,
            n_outlets: row[4].parse().map_err(|_| Error::Schema("bad n_outlets".into()))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn ratios() {
        assert_eq!(relative_mean(100.0, 50.0).unwrap(), 2.0);
        assert_eq!(coefficient_of_variation(0.0, 3.0).unwrap(), 0.0);
        assert!(relative_mean(0.0, 1.0).is_err());
        assert!(coefficient_of_variation(1.0, 0.0).is_err());
    }

    #[test]
    fn two_outlets_average_before_log() {
        let window = StudyWindow::new(d(2020, 1, 1), d(2020, 1, 15)).unwrap();
        let mk = |o: &str, day, mu: f64| OutletDayMoments { outlet_id: o.into(), day, mu, sigma: mu, outlet_mean: 1.0 };
        let m = vec![mk("a", d(2020, 1, 1), 1.0), mk("b", d(2020, 1, 2), 2.0), mk("b", d(2020, 1, 3), 4.0)];
        let s = build_weekly_signal(&m, &window).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0].log_rel_mean.unwrap() - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(s[0].n_outlets, 2);
        assert!(s[1].is_missing());
    }

    #[test]
    fn out_of_window_day_is_error() {
        let window = StudyWindow::new(d(2020, 1, 1), d(2020, 1, 8)).unwrap();
        let m = vec![OutletDayMoments { outlet_id: "a".into(), day: d(2020, 1, 8), mu: 1.0, sigma: 1.0, outlet_mean: 1.0 }];
        assert!(build_weekly_signal(&m, &window).is_err());
    }
}
