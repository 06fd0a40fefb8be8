//! Partition of the study window into epochs delimited by changepoint dates.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::StudyWindow;

/// Epoch `k` covers `[starts[k-1], starts[k])`, with epoch 0 starting at the
/// window start. A day equal to a changepoint date belongs to the new epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPartition {
    pub window: StudyWindow,
    pub starts: Vec<NaiveDate>,
}

impl EpochPartition {
    pub fn new(window: StudyWindow, mut starts: Vec<NaiveDate>) -> Result<Self> {
        starts.sort();
        starts.dedup();
        if let Some(bad) = starts.iter().find(|d| !window.contains(**d) || **d == window.start) {
            return Err(Error::Domain(format!("changepoint {bad} lies outside the interior of the study window")));
        }
        Ok(Self { window, starts })
    }

    pub fn single(window: StudyWindow) -> Self {
        Self { window, starts: Vec::new() }
    }

    pub fn n_epochs(&self) -> usize {
        self.starts.len() + 1
    }

    pub fn epoch_of(&self, day: NaiveDate) -> Option<usize> {
        self.window.contains(day).then(|| self.starts.partition_point(|s| *s <= day))
    }

    /// Half-open date range of epoch `k`.
    pub fn bounds(&self, k: usize) -> (NaiveDate, NaiveDate) {
        let lo = if k == 0 { self.window.start } else { self.starts[k - 1] };
        let hi = self.starts.get(k).copied().unwrap_or(self.window.end);
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, m, day).unwrap()
    }

    #[test]
    fn left_closed_epochs() {
        let w = StudyWindow::new(d(1, 1), d(3, 1)).unwrap();
        let p = EpochPartition::new(w, vec![d(2, 1)]).unwrap();
        assert_eq!(p.n_epochs(), 2);
        assert_eq!(p.epoch_of(d(1, 31)), Some(0));
        assert_eq!(p.epoch_of(d(2, 1)), Some(1));
        assert_eq!(p.epoch_of(d(3, 1)), None);
        assert_eq!(p.bounds(1), (d(2, 1), d(3, 1)));
        assert_eq!(EpochPartition::single(w).epoch_of(d(2, 15)), Some(0));
        assert!(EpochPartition::new(w, vec![d(4, 1)]).is_err());
    }
}
