//! Turning post tables into model frames for the preliminary and epoch models.

use std::collections::{BTreeMap, HashMap};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::epoch::EpochPartition;
use crate::error::{Error, Result};
use crate::frame::ModelData;
use crate::glmm::{predict_conditional, GlmmFit};
use crate::ingest::{OutletMeta, PostTable, Quality, Sector};
use crate::signal::{OutletDayMoments, StudyWindow};

/// Which outlets enter a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    NewsOnly,
    NewsAndNonnews,
}

impl Scope {
    pub fn admits(self, sector: Sector) -> bool {
        self == Scope::NewsAndNonnews || sector == Sector::News
    }
}

pub const QUALITY_ORDER: [Quality; 4] = [Quality::Low, Quality::Medium, Quality::High, Quality::NonNews];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedCell {
    pub outlet_id: String,
    pub epoch: usize,
    pub n_obs: usize,
}

#[derive(Debug, Clone)]
pub struct PanelFrame {
    pub data: ModelData,
    /// Index into the post table of each model row.
    pub rows: Vec<usize>,
    pub excluded: Vec<ExcludedCell>,
}

fn outlet_index(outlets: &[OutletMeta]) -> HashMap<&str, &OutletMeta> {
    outlets.iter().map(|o| (o.outlet_id.as_str(), o)).collect()
}

struct Row<'a> {
    meta: &'a OutletMeta,
    date: NaiveDate,
    epoch: Option<usize>,
}

fn add_common(data: &mut ModelData, rows: &[Row]) -> Result<()> {
    let quality_levels: Vec<String> = QUALITY_ORDER.iter().map(|q| q.as_str().to_string()).collect();
    let outlet: Vec<&str> = rows.iter().map(|r| r.meta.outlet_id.as_str()).collect();
    let quality: Vec<&str> = rows.iter().map(|r| r.meta.quality.as_str()).collect();
    let sector: Vec<&str> = rows.iter().map(|r| if r.meta.sector == Sector::News { "news" } else { "non_news" }).collect();
    data.add_factor("outlet", &outlet)?;
    data.add_factor_with_levels("quality", &quality, quality_levels)?;
    data.add_factor_with_levels("sector", &sector, vec!["news".to_string(), "non_news".to_string()])?;
    data.add_factor("year", &rows.iter().map(|r| r.date.year().to_string()).collect::<Vec<_>>())?;
    data.add_factor("month", &rows.iter().map(|r| r.date.month().to_string()).collect::<Vec<_>>())?;
    data.add_factor("day", &rows.iter().map(|r| r.date.day().to_string()).collect::<Vec<_>>())?;
    data.add_numeric("n_posts", rows.iter().map(|r| r.meta.mean_posts).collect())?;
    if rows.iter().all(|r| r.epoch.is_some()) {
        let epoch: Vec<String> = rows.iter().map(|r| r.epoch.unwrap_or(0).to_string()).collect();
        data.add_factor("epoch", &epoch)?;
    }
    Ok(())
}

/// Model frame with columns `reactions`, `outlet`, `quality`, `sector`,
/// `year`, `month`, `day`, `n_posts` and, with a partition, `epoch`.
/// Posts without reactions or outside the window are skipped. Outlet-epoch
/// cells with fewer than `cell_floor` posts are excluded and reported.
pub fn panel_frame(
    table: &PostTable,
    outlets: &[OutletMeta],
    window: &StudyWindow,
    partition: Option<&EpochPartition>,
    scope: Scope,
    cell_floor: usize,
) -> Result<PanelFrame> {
    let index = outlet_index(outlets);
    let mut kept: Vec<(usize, Row, f64)> = Vec::new();
    for (i, r) in table.records.iter().enumerate() {
        let Some(y) = r.reactions else { continue };
        let meta = *index
            .get(r.outlet_id.as_str())
            .ok_or_else(|| Error::Schema(format!("post {} references unknown outlet {}", r.post_id, r.outlet_id)))?;
        let date = r.published_at.date_naive();
        if !scope.admits(meta.sector) || !window.contains(date) {
            continue;
        }
        let epoch = partition.map(|p| p.epoch_of(date).expect("window checked"));
        kept.push((i, Row { meta, date, epoch }, y as f64));
    }
    let mut excluded = Vec::new();
    if let Some(p) = partition {
        let mut counts: BTreeMap<(&str, usize), usize> = BTreeMap::new();
        for (_, r, _) in &kept {
            *counts.entry((r.meta.outlet_id.as_str(), r.epoch.unwrap_or(0))).or_default() += 1;
        }
        let small: BTreeMap<(String, usize), usize> = counts
            .into_iter()
            .filter(|(_, n)| *n < cell_floor)
            .map(|((o, e), n)| ((o.to_string(), e), n))
            .collect();
        if !small.is_empty() {
            kept.retain(|(_, r, _)| !small.contains_key(&(r.meta.outlet_id.clone(), r.epoch.unwrap_or(0))));
        }
        excluded = small.into_iter().map(|((outlet_id, epoch), n_obs)| ExcludedCell { outlet_id, epoch, n_obs }).collect();
        debug_assert!(excluded.iter().all(|c| c.epoch < p.n_epochs()));
    }
    if kept.is_empty() {
        return Err(Error::InsufficientData("no posts left for the model".into()));
    }
    let mut data = ModelData::new(kept.len());
    data.add_numeric("reactions", kept.iter().map(|k| k.2).collect())?;
    let rows: Vec<Row> = kept.iter().map(|(_, r, _)| Row { meta: r.meta, date: r.date, epoch: r.epoch }).collect();
    add_common(&mut data, &rows)?;
    Ok(PanelFrame { data, rows: kept.iter().map(|k| k.0).collect(), excluded })
}

/// Conditional moments for every outlet-day with at least one post in the
/// frame, relative to the outlet's empirical mean reaction count.
pub fn outlet_day_moments(
    fit: &GlmmFit,
    table: &PostTable,
    outlets: &[OutletMeta],
    frame: &PanelFrame,
) -> Result<Vec<OutletDayMoments>> {
    let index = outlet_index(outlets);
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    let mut cells: BTreeMap<(&str, NaiveDate), ()> = BTreeMap::new();
    for &i in &frame.rows {
        let r = &table.records[i];
        let s = sums.entry(r.outlet_id.as_str()).or_insert((0.0, 0));
        s.0 += r.reactions.unwrap_or(0) as f64;
        s.1 += 1;
        cells.insert((r.outlet_id.as_str(), r.published_at.date_naive()), ());
    }
    let keys: Vec<(&str, NaiveDate)> = cells.into_keys().collect();
    let rows: Vec<Row> = keys.iter().map(|(o, d)| Row { meta: index[o], date: *d, epoch: None }).collect();
    let mut data = ModelData::new(rows.len());
    add_common(&mut data, &rows)?;
    let moments = predict_conditional(fit, &data)?;
    keys.iter()
        .zip(moments)
        .map(|((o, d), m)| {
            let (sum, n) = sums[o];
            let outlet_mean = sum / n as f64;
            if outlet_mean <= 0.0 {
                return Err(Error::Domain(format!("outlet {o} has no reactions, its relative mean is undefined")));
            }
            Ok(OutletDayMoments { outlet_id: o.to_string(), day: *d, mu: m.mu, sigma: m.sigma, outlet_mean })
        })
        .collect()
}
