//! Post tables: parsing, deduplication, cleaning and reaction imputation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ols::{ols, pearson};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostType {
    Status,
    Link,
    Photo,
    Video,
    Event,
    Music,
    Unknown,
}

impl PostType {
    pub fn as_str(self) -> &'static str {
        match self {
            PostType::Status => "status",
            PostType::Link => "link",
            PostType::Photo => "photo",
            PostType::Video => "video",
            PostType::Event => "event",
            PostType::Music => "music",
            PostType::Unknown => "unknown",
        }
    }
}

impl FromStr for PostType {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "status" => PostType::Status,
            "link" => PostType::Link,
            "photo" => PostType::Photo,
            "video" => PostType::Video,
            "event" => PostType::Event,
            "music" => PostType::Music,
            "unknown" | "" => PostType::Unknown,
            other => return Err(format!("unrecognized post type `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    PrimaryFeed,
    Library,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::PrimaryFeed => "primary_feed",
            Source::Library => "library",
        }
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "" | "primary_feed" => Ok(Source::PrimaryFeed),
            "library" => Ok(Source::Library),
            other => Err(format!("unrecognized source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeFlag {
    #[default]
    Observed,
    Imputed,
    Unimputable,
}

impl ImputeFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ImputeFlag::Observed => "observed",
            ImputeFlag::Imputed => "imputed",
            ImputeFlag::Unimputable => "unimputable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub post_id: String,
    pub outlet_id: String,
    pub published_at: DateTime<Utc>,
    pub post_type: PostType,
    pub author_is_page: bool,
    pub text: String,
    pub reactions: Option<u64>,
    pub comments: Option<u64>,
    pub views: Option<u64>,
    pub source: Source,
    pub imputed_flag: ImputeFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sector {
    News,
    NonNews,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Low,
    Medium,
    High,
    NonNews,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Low => "low",
            Quality::Medium => "medium",
            Quality::High => "high",
            Quality::NonNews => "non_news",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutletMeta {
    pub outlet_id: String,
    pub name: String,
    pub sector: Sector,
    pub quality: Quality,
    pub mean_posts: f64,
}

impl OutletMeta {
    pub fn validate(&self) -> Result<()> {
        if (self.sector == Sector::NonNews) != (self.quality == Quality::NonNews) {
            return Err(Error::Schema(format!("outlet {}: sector and quality disagree", self.outlet_id)));
        }
        if !(self.mean_posts > 0.0) {
            return Err(Error::Schema(format!("outlet {}: mean_posts must be positive", self.outlet_id)));
        }
        Ok(())
    }
}

pub fn read_outlets<R: Read>(reader: R) -> Result<Vec<OutletMeta>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let meta: OutletMeta = row?;
        meta.validate()?;
        out.push(meta);
    }
    Ok(out)
}

pub fn write_outlets<W: Write>(writer: W, outlets: &[OutletMeta]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for o in outlets {
        w.serialize(o)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line number in the input (header is line 1).
    pub line: usize,
    pub post_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PostTable {
    pub records: Vec<PostRecord>,
    pub rejects: Vec<Reject>,
}

impl PostTable {
    pub fn new(records: Vec<PostRecord>) -> Self {
        Self { records, rejects: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Input layout: delimiter and a map from logical field to header name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub delimiter: u8,
    pub columns: BTreeMap<String, String>,
}

pub const FIELDS: [&str; 10] = [
    "post_id",
    "outlet_id",
    "published_at",
    "post_type",
    "author_is_page",
    "text",
    "reactions",
    "comments",
    "views",
    "source",
];

const MANDATORY: [&str; 5] = ["post_id", "outlet_id", "published_at", "post_type", "reactions"];

impl Default for Schema {
    fn default() -> Self {
        Self { delimiter: b',', columns: FIELDS.iter().map(|f| (f.to_string(), f.to_string())).collect() }
    }
}

/// Parses an ISO-8601 timestamp. Offsets are converted to UTC; naive
/// timestamps are read as UTC.
pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t.and_utc());
        }
    }
    Err(format!("unparseable timestamp `{s}`"))
}

fn parse_count(field: &str, s: &str) -> std::result::Result<Option<u64>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    if s.starts_with('-') {
        return Err(format!("negative {field} count `{s}`"));
    }
    s.parse::<u64>().map(Some).map_err(|_| format!("malformed {field} count `{s}`"))
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("malformed boolean `{other}`")),
    }
}

/// Reads a delimited post table. Malformed rows go to `rejects` with a reason.
pub fn parse_posts<R: Read>(reader: R, schema: &Schema) -> Result<PostTable> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(schema.delimiter).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for field in FIELDS.iter().chain(std::iter::once(&"imputed_flag")) {
        let name = schema.columns.get(*field).map_or(*field, String::as_str);
        if let Some(pos) = headers.iter().position(|h| h == name) {
            index.insert(field, pos);
        }
    }
    for m in MANDATORY {
        if !index.contains_key(m) {
            let name = schema.columns.get(m).map_or(m, String::as_str);
            return Err(Error::Schema(format!("missing mandatory column `{name}`")));
        }
    }
    let mut table = PostTable::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                table.rejects.push(Reject { line, post_id: String::new(), reason: format!("unreadable row: {e}") });
                continue;
            }
        };
        let get = |f: &str| index.get(f).and_then(|&i| row.get(i)).unwrap_or("");
        let post_id = get("post_id").trim().to_string();
        let parsed = (|| -> std::result::Result<PostRecord, String> {
            if post_id.is_empty() {
                return Err("empty post_id".into());
            }
            let outlet_id = get("outlet_id").trim().to_string();
            if outlet_id.is_empty() {
                return Err("empty outlet_id".into());
            }
            let imputed_flag = match get("imputed_flag").trim() {
                "" | "observed" => ImputeFlag::Observed,
                "imputed" => ImputeFlag::Imputed,
                "unimputable" => ImputeFlag::Unimputable,
                other => return Err(format!("unrecognized imputed_flag `{other}`")),
            };
            Ok(PostRecord {
                post_id: post_id.clone(),
                outlet_id,
                published_at: parse_timestamp(get("published_at"))?,
                post_type: get("post_type").parse()?,
                author_is_page: parse_bool(get("author_is_page"))?,
                text: get("text").to_string(),
                reactions: parse_count("reactions", get("reactions"))?,
                comments: parse_count("comments", get("comments"))?,
                views: parse_count("views", get("views"))?,
                source: get("source").parse()?,
                imputed_flag,
            })
        })();
        match parsed {
            Ok(rec) => {
                if !seen.insert(rec.post_id.clone()) {
                    table.rejects.push(Reject { line, post_id, reason: "duplicate post_id".into() });
                } else {
                    table.records.push(rec);
                }
            }
            Err(reason) => table.rejects.push(Reject { line, post_id, reason }),
        }
    }
    Ok(table)
}

fn opt(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Writes records in the input schema plus `imputed_flag`.
pub fn write_posts<W: Write>(writer: W, records: &[PostRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FIELDS.to_vec();
    header.push("imputed_flag");
    w.write_record(&header)?;
    for r in records {
        w.write_record([
            r.post_id.as_str(),
            r.outlet_id.as_str(),
            &format_timestamp(&r.published_at),
            r.post_type.as_str(),
            if r.author_is_page { "true" } else { "false" },
            r.text.as_str(),
            &opt(r.reactions),
            &opt(r.comments),
            &opt(r.views),
            r.source.as_str(),
            r.imputed_flag.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejects<W: Write>(writer: W, rejects: &[Reject]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["line", "post_id", "reason"])?;
    for r in rejects {
        w.write_record([r.line.to_string().as_str(), &r.post_id, &r.reason])?;
    }
    w.flush()?;
    Ok(())
}

/// Lowercase text with every non-alphanumeric code point removed.
pub fn normalize_text(text: &str) -> String {
    text.chars().flat_map(char::to_lowercase).filter(|c| c.is_alphanumeric()).collect()
}

/// Duplicate-detection key. Records with equal keys are the same post
/// regardless of which source delivered them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DedupKey {
    pub outlet_id: String,
    pub normalized_text: String,
    pub published_at: DateTime<Utc>,
}

impl DedupKey {
    pub fn of(r: &PostRecord) -> Self {
        Self { outlet_id: r.outlet_id.clone(), normalized_text: normalize_text(&r.text), published_at: r.published_at }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub removed: usize,
    pub removed_cross_source: usize,
}

/// Whether `a` should be kept over `b`: primary feed first, then more
/// reactions, then the smaller post id.
fn preferred(a: &PostRecord, b: &PostRecord) -> bool {
    let rank = |r: &PostRecord| (r.source != Source::PrimaryFeed, std::cmp::Reverse(r.reactions.map_or(-1i128, i128::from)));
    match rank(a).cmp(&rank(b)) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a.post_id < b.post_id,
    }
}

/// Keeps one record per [`DedupKey`], preserving input order of survivors.
pub fn deduplicate(table: &PostTable) -> (PostTable, DedupReport) {
    let mut best: HashMap<DedupKey, usize> = HashMap::new();
    let mut cross: HashSet<DedupKey> = HashSet::new();
    for (i, r) in table.records.iter().enumerate() {
        let key = DedupKey::of(r);
        match best.get(&key) {
            Some(&j) => {
                if table.records[j].source != r.source {
                    cross.insert(key.clone());
                }
                if preferred(r, &table.records[j]) {
                    best.insert(key, i);
                }
            }
            None => {
                best.insert(key, i);
            }
        }
    }
    let keep: HashSet<usize> = best.values().copied().collect();
    let mut removed_cross_source = 0;
    let records: Vec<PostRecord> = table
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            if keep.contains(&i) {
                Some(r.clone())
            } else {
                if cross.contains(&DedupKey::of(r)) {
                    removed_cross_source += 1;
                }
                None
            }
        })
        .collect();
    let report = DedupReport { removed: table.records.len() - records.len(), removed_cross_source };
    (PostTable { records, rejects: table.rejects.clone() }, report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub allowed_types: Vec<PostType>,
    pub window_start: NaiveDate,
    /// Exclusive end date.
    pub window_end: NaiveDate,
    pub require_page_author: bool,
}

impl CleaningConfig {
    pub fn new(window_start: NaiveDate, window_end: NaiveDate) -> Self {
        Self {
            allowed_types: vec![PostType::Status, PostType::Link, PostType::Photo, PostType::Video],
            window_start,
            window_end,
            require_page_author: true,
        }
    }

    pub fn contains(&self, t: &DateTime<Utc>) -> bool {
        let d = t.date_naive();
        d >= self.window_start && d < self.window_end
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub kept: usize,
    pub removed: BTreeMap<String, usize>,
}

impl CleaningReport {
    pub fn total_removed(&self) -> usize {
        self.removed.values().sum()
    }
}

/// Drops out-of-window posts, user posts and disallowed types. Each removed
/// record is counted under the first rule it fails.
pub fn filter_valid(table: &PostTable, rules: &CleaningConfig) -> (PostTable, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut records = Vec::new();
    for r in &table.records {
        let reason = if !rules.contains(&r.published_at) {
            Some("outside_window".to_string())
        } else if rules.require_page_author && !r.author_is_page {
            Some("author_not_page".to_string())
        } else if !rules.allowed_types.contains(&r.post_type) {
            Some(format!("type_{}", r.post_type.as_str()))
        } else {
            None
        };
        match reason {
            Some(reason) => *report.removed.entry(reason).or_default() += 1,
            None => records.push(r.clone()),
        }
    }
    report.kept = records.len();
    (PostTable { records, rejects: table.rejects.clone() }, report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxyFit {
    pub intercept: f64,
    pub slope_reactions: f64,
    pub slope_comments: Option<f64>,
    /// Standard errors in coefficient order (intercept, reactions, comments).
    pub se: Vec<f64>,
    pub adjusted_r2: f64,
    pub r2: f64,
    pub n: usize,
    pub cor_views_reactions: Option<f64>,
    pub cor_views_comments: Option<f64>,
}

/// Regresses views on reactions (and comments when `with_comments`).
pub fn fit_views_proxy(table: &PostTable, with_comments: bool) -> Result<ProxyFit> {
    let rows: Vec<(f64, f64, Option<f64>)> = table
        .records
        .iter()
        .filter_map(|r| {
            let (v, re) = (r.views?, r.reactions?);
            if with_comments {
                Some((v as f64, re as f64, Some(r.comments? as f64)))
            } else {
                Some((v as f64, re as f64, r.comments.map(|c| c as f64)))
            }
        })
        .collect();
    if rows.len() < 3 {
        return Err(Error::InsufficientData(format!("{} complete rows, need 3", rows.len())));
    }
    let views: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let reactions: Vec<f64> = rows.iter().map(|r| r.1).collect();
    if reactions.iter().all(|&v| v == reactions[0]) {
        return Err(Error::SingularDesign("reactions have zero variance".into()));
    }
    let p = if with_comments { 3 } else { 2 };
    let x: Vec<f64> = rows
        .iter()
        .flat_map(|r| {
            let mut row = vec![1.0, r.1];
            if with_comments {
                row.push(r.2.unwrap_or(0.0));
            }
            row
        })
        .collect();
    let fit = ols(&x, p, &views)?;
    let with_c: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.2.map(|c| (r.0, c))).collect();
    let (cv, cc): (Vec<f64>, Vec<f64>) = with_c.into_iter().unzip();
    Ok(ProxyFit {
        intercept: fit.coef[0],
        slope_reactions: fit.coef[1],
        slope_comments: with_comments.then(|| fit.coef[2]),
        se: fit.se.clone(),
        adjusted_r2: fit.adj_r2.clamp(0.0, 1.0),
        r2: fit.r2,
        n: fit.n,
        cor_views_reactions: pearson(&views, &reactions),
        cor_views_comments: pearson(&cv, &cc),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationFit {
    pub intercept: f64,
    pub views_slope: f64,
    /// Offset relative to the baseline outlet (0 for the baseline).
    pub outlet_offset: BTreeMap<String, f64>,
    /// Views slope shift relative to the baseline outlet.
    pub outlet_interaction: BTreeMap<String, f64>,
    pub video: f64,
    pub r2: f64,
    pub coef_names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    /// Outlets whose slope could not be estimated; they use the pooled slope.
    pub unidentifiable: Vec<String>,
}

impl ImputationFit {
    pub fn predict(&self, outlet: &str, views: f64, is_video: bool) -> f64 {
        self.intercept
            + self.outlet_offset.get(outlet).copied().unwrap_or(0.0)
            + (self.views_slope + self.outlet_interaction.get(outlet).copied().unwrap_or(0.0)) * views
            + if is_video { self.video } else { 0.0 }
    }
}

/// Least-squares fit of reactions on views with per-outlet offsets and
/// slopes and a video indicator.
pub fn fit_imputation(table: &PostTable) -> Result<ImputationFit> {
    let rows: Vec<&PostRecord> = table.records.iter().filter(|r| r.reactions.is_some() && r.views.is_some()).collect();
    let mut by_outlet: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_outlet.entry(r.outlet_id.as_str()).or_default().push(r.views.unwrap_or(0) as f64);
    }
    if by_outlet.is_empty() {
        return Err(Error::InsufficientData("no rows with both reactions and views".into()));
    }
    let outlets: Vec<&str> = by_outlet.keys().copied().collect();
    let baseline = outlets[0];
    let mut unidentifiable = Vec::new();
    let mut slope_outlets = Vec::new();
    for &o in &outlets[1..] {
        let v = &by_outlet[o];
        let distinct = v.iter().any(|&x| x != v[0]);
        if v.len() >= 2 && distinct {
            slope_outlets.push(o);
        } else {
            unidentifiable.push(o.to_string());
        }
    }
    let base_views = &by_outlet[baseline];
    if base_views.len() < 2 || base_views.iter().all(|&x| x == base_views[0]) {
        unidentifiable.insert(0, baseline.to_string());
    }
    let has_video = rows.iter().any(|r| r.post_type == PostType::Video) && rows.iter().any(|r| r.post_type != PostType::Video);
    let mut names = vec!["(Intercept)".to_string(), "views".to_string()];
    names.extend(outlets[1..].iter().map(|o| format!("outlet={o}")));
    names.extend(slope_outlets.iter().map(|o| format!("views:outlet={o}")));
    if has_video {
        names.push("video".into());
    }
    let p = names.len();
    let oi: HashMap<&str, usize> = outlets[1..].iter().enumerate().map(|(i, o)| (*o, 2 + i)).collect();
    let si: HashMap<&str, usize> =
        slope_outlets.iter().enumerate().map(|(i, o)| (*o, 1 + outlets.len() + i)).collect();
    let mut x = vec![0.0; rows.len() * p];
    let mut y = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let v = r.views.unwrap_or(0) as f64;
        let row = &mut x[i * p..(i + 1) * p];
        row[0] = 1.0;
        row[1] = v;
        if let Some(&j) = oi.get(r.outlet_id.as_str()) {
            row[j] = 1.0;
        }
        if let Some(&j) = si.get(r.outlet_id.as_str()) {
            row[j] = v;
        }
        if has_video && r.post_type == PostType::Video {
            row[p - 1] = 1.0;
        }
        y.push(r.reactions.unwrap_or(0) as f64);
    }
    if rows.len() <= p {
        return Err(Error::InsufficientData(format!("{} complete rows for {p} coefficients", rows.len())));
    }
    let fit = ols(&x, p, &y)?;
    let mut outlet_offset = BTreeMap::new();
    let mut outlet_interaction = BTreeMap::new();
    outlet_offset.insert(baseline.to_string(), 0.0);
    outlet_interaction.insert(baseline.to_string(), 0.0);
    for &o in &outlets[1..] {
        outlet_offset.insert(o.to_string(), fit.coef[oi[o]]);
        outlet_interaction.insert(o.to_string(), si.get(o).map_or(0.0, |&j| fit.coef[j]));
    }
    Ok(ImputationFit {
        intercept: fit.coef[0],
        views_slope: fit.coef[1],
        outlet_offset,
        outlet_interaction,
        video: if has_video { fit.coef[p - 1] } else { 0.0 },
        r2: fit.r2,
        coef_names: names,
        coef: fit.coef,
        se: fit.se,
        unidentifiable,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub imputed: usize,
    pub unimputable: usize,
}

/// Fills missing reactions from views. Predictions are clamped at zero and
/// rounded half-up; observed values are untouched.
pub fn impute_reactions(table: &PostTable, fit: &ImputationFit) -> (PostTable, ImputationReport) {
    let mut report = ImputationReport::default();
    let records = table
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.reactions.is_none() {
                match r.views {
                    Some(v) => {
                        let pred = fit.predict(&r.outlet_id, v as f64, r.post_type == PostType::Video);
                        r.reactions = Some((pred.max(0.0) + 0.5).floor() as u64);
                        r.imputed_flag = ImputeFlag::Imputed;
                        report.imputed += 1;
                    }
                    None => {
                        r.imputed_flag = ImputeFlag::Unimputable;
                        report.unimputable += 1;
                    }
                }
            }
            r
        })
        .collect();
    (PostTable { records, rejects: table.rejects.clone() }, report)
}
