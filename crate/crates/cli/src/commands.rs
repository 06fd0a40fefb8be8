//! One function per pipeline stage. Each reads the artifacts of the stages
//! before it, checks their config hash and writes its own.

use std::path::Path;

use engshift_core::changepoint::{consensus, partition_epochs, run_many, sampler_registry, ChangepointSet};
use engshift_core::epoch::EpochPartition;
use engshift_core::formula::FormulaSpec;
use engshift_core::glmm::{fit_nb_glmm, FitOptions, GlmmFit};
use engshift_core::inference::{
    epoch_model_spec, outlet_day_moments, panel_frame, preliminary_spec, summarize_epochs, EpochSummary, ExcludedCell,
    PanelFrame,
};
use engshift_core::ingest::{
    deduplicate, filter_valid, fit_imputation, fit_views_proxy, impute_reactions, parse_posts, read_outlets, write_outlets,
    write_posts, write_rejects, CleaningConfig, CleaningReport, DedupReport, ImputationFit, ImputationReport, OutletMeta,
    PostTable, ProxyFit, Schema,
};
use engshift_core::signal::{build_weekly_signal, read_signal, write_signal, StudyWindow, WeeklySignal};
use engshift_core::synthetic::{generate_panel, PanelTruth};
use engshift_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::artifact::{read_json, read_table, split_stamp, CliError, CliResult, Stage};
use crate::config::PipelineConfig;
use crate::report;

pub const POSTS: &str = "ingest/posts.csv";
pub const OUTLETS: &str = "ingest/outlets.csv";
pub const REJECTS: &str = "ingest/rejects.csv";
pub const INGEST_SUMMARY: &str = "ingest/summary.json";
pub const PRELIM_FIT: &str = "preliminary/fit.json";
pub const SIGNAL: &str = "signal/signal.csv";
pub const CHANGEPOINTS: &str = "detect/changepoints.json";
pub const POSTERIOR: &str = "detect/posterior.csv";
pub const PARTITION: &str = "epochs/partition.json";
pub const EPOCH_FIT: &str = "epochs/fit.json";
pub const EXCLUDED: &str = "epochs/excluded.csv";
pub const SUMMARY: &str = "infer/summary.json";
pub const EMM_TABLE: &str = "infer/emm.csv";
pub const CONTRAST_TABLE: &str = "infer/contrasts.csv";
pub const TRUTH: &str = "simulate/truth.json";

fn window(cfg: &PipelineConfig) -> Result<StudyWindow> {
    StudyWindow::new(cfg.window.start, cfg.window.end)
}

/// Reads an input table that may carry a stamp from `simulate`.
fn read_input(path: &Path, hash: &str) -> CliResult<(String, bool)> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("input file {} does not exist", path.display())),
        _ => Error::from(e),
    })?;
    match split_stamp(&text) {
        (Some(found), _) if found != hash => Err(CliError::HashMismatch {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: hash.to_string(),
        }),
        (Some(_), body) => Ok((body.to_string(), true)),
        (None, body) => Ok((body.to_string(), false)),
    }
}

pub fn simulate(cfg: &PipelineConfig) -> CliResult<()> {
    let sim = cfg.simulate.as_ref().ok_or_else(|| Error::Config("no [simulate] section in the configuration".into()))?;
    let truth = PanelTruth {
        start: cfg.window.start,
        changepoints: sim.changepoints.clone(),
        groups: sim.groups.clone(),
        log_mean: sim.log_mean.clone(),
        did_log: sim.did_log.clone(),
        sd_outlet: sim.sd_outlet,
        sd_outlet_epoch: sim.sd_outlet_epoch,
        sd_day: sim.sd_day,
        parametrization: sim.parametrization,
        phi: sim.phi,
        posts_per_day: sim.posts_per_day,
        rate_sd: sim.rate_sd,
        views_per_reaction: sim.views_per_reaction,
        seed: cfg.seed,
    };
    let panel = generate_panel(&truth, sim.n_outlets, window(cfg)?.n_days())?;
    let mut st = Stage::new(cfg, "simulate");
    st.write_table(&cfg.paths.posts, |w| write_posts(w, &panel.table.records))?;
    st.write_table(&cfg.paths.outlets, |w| write_outlets(w, &panel.outlets))?;
    st.write_json(&st.path(TRUTH), &truth)?;
    st.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestSummary {
    pub parsed: usize,
    pub rejected: usize,
    pub dedup: DedupReport,
    pub cleaning: CleaningReport,
    pub imputation_fit: Option<ImputationFit>,
    pub imputation: Option<ImputationReport>,
    /// Views-as-proxy diagnostic; `None` when there are too few views.
    pub views_proxy: Option<ProxyFit>,
    pub n_outlets: usize,
}

pub fn ingest(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "ingest");
    let (posts_text, stamped) = read_input(&cfg.paths.posts, &st.hash)?;
    let mut schema = Schema { delimiter: cfg.cleaning.delimiter as u8, ..Schema::default() };
    schema.columns.extend(cfg.cleaning.columns.clone());
    let mut table = parse_posts(posts_text.as_bytes(), &schema)?;
    if stamped {
        for r in &mut table.rejects {
            r.line += 1;
        }
    }
    let (outlet_text, _) = read_input(&cfg.paths.outlets, &st.hash)?;
    let outlets = read_outlets(outlet_text.as_bytes())?;
    if outlets.is_empty() {
        return Err(Error::InsufficientData("no outlets in the outlet table".into()).into());
    }
    let parsed = table.len();

    let (table, dedup) = deduplicate(&table);
    let rules = CleaningConfig {
        allowed_types: cfg.cleaning.allowed_types.clone(),
        require_page_author: cfg.cleaning.require_page_author,
        ..CleaningConfig::new(cfg.window.start, cfg.window.end)
    };
    let (mut table, cleaning) = filter_valid(&table, &rules);
    let unknown: Vec<&str> = table
        .records
        .iter()
        .map(|r| r.outlet_id.as_str())
        .filter(|o| !outlets.iter().any(|m| m.outlet_id == *o))
        .collect();
    if let Some(o) = unknown.first() {
        return Err(Error::Schema(format!("posts reference outlet `{o}` missing from the outlet table")).into());
    }

    let views_proxy = match fit_views_proxy(&table, true) {
        Ok(f) => Some(f),
        Err(e) => {
            log::info!("views proxy diagnostic skipped: {e}");
            None
        }
    };
    let needs_imputation = table.records.iter().any(|r| r.reactions.is_none() && r.views.is_some());
    let (mut imputation_fit, mut imputation) = (None, None);
    if cfg.cleaning.impute && needs_imputation {
        let fit = fit_imputation(&table)?;
        let (t, rep) = impute_reactions(&table, &fit);
        table = t;
        imputation_fit = Some(fit);
        imputation = Some(rep);
    }

    let summary = IngestSummary {
        parsed,
        rejected: table.rejects.len(),
        dedup,
        cleaning,
        imputation_fit,
        imputation,
        views_proxy,
        n_outlets: outlets.len(),
    };
    st.write_table(&st.path(POSTS), |w| write_posts(w, &table.records))?;
    st.write_table(&st.path(OUTLETS), |w| write_outlets(w, &outlets))?;
    st.write_table(&st.path(REJECTS), |w| write_rejects(w, &table.rejects))?;
    st.write_json(&st.path(INGEST_SUMMARY), &summary)?;
    st.finish()
}

/// Cleaned posts and outlet table from the ingest stage.
fn load_ingested(cfg: &PipelineConfig, hash: &str) -> CliResult<(PostTable, Vec<OutletMeta>)> {
    let out = &cfg.paths.output_dir;
    let posts = read_table(&out.join(POSTS), "ingest", hash)?;
    let outlets = read_table(&out.join(OUTLETS), "ingest", hash)?;
    Ok((parse_posts(posts.as_bytes(), &Schema::default())?, read_outlets(outlets.as_bytes())?))
}

fn preliminary_formula(cfg: &PipelineConfig) -> Result<FormulaSpec> {
    let f = &cfg.formulas;
    let d = preliminary_spec();
    match (&f.preliminary_mean, &f.preliminary_dispersion, f.preliminary_family) {
        (None, None, None) => Ok(d),
        (m, disp, fam) => {
            let mean = m.clone().unwrap_or_else(|| d.mean.to_string());
            let disp = disp.clone().unwrap_or_else(|| d.dispersion.to_string());
            FormulaSpec::parse(&mean, &disp, fam.unwrap_or(d.parametrization))
        }
    }
}

fn preliminary_frame(cfg: &PipelineConfig, table: &PostTable, outlets: &[OutletMeta]) -> Result<PanelFrame> {
    panel_frame(table, outlets, &window(cfg)?, None, cfg.preliminary_scope, 0)
}

pub fn fit_preliminary(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "fit-preliminary");
    let (table, outlets) = load_ingested(cfg, &st.hash)?;
    let frame = preliminary_frame(cfg, &table, &outlets)?;
    let fit = fit_nb_glmm(&frame.data, "reactions", &preliminary_formula(cfg)?, &FitOptions::default())?;
    if !fit.converged {
        log::warn!("preliminary fit did not converge: {}", fit.diagnostics.stop);
    }
    st.write_json(&st.path(PRELIM_FIT), &fit)?;
    st.finish()
}

pub fn build_signal(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "build-signal");
    let fit: GlmmFit = read_json(&st.path(PRELIM_FIT), "fit-preliminary", &st.hash)?;
    let (table, outlets) = load_ingested(cfg, &st.hash)?;
    let frame = preliminary_frame(cfg, &table, &outlets)?;
    let moments = outlet_day_moments(&fit, &table, &outlets, &frame)?;
    let signal = build_weekly_signal(&moments, &window(cfg)?)?;
    st.write_table(&st.path(SIGNAL), |w| write_signal(w, &signal))?;
    st.finish()
}

fn load_signal(cfg: &PipelineConfig, hash: &str) -> CliResult<Vec<WeeklySignal>> {
    let text = read_table(&cfg.paths.output_dir.join(SIGNAL), "build-signal", hash)?;
    Ok(read_signal(text.as_bytes())?)
}

pub fn detect(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "detect");
    let signal = load_signal(cfg, &st.hash)?;
    let sampler = sampler_registry().get(&cfg.detect.sampler)?;
    let cc = cfg.consensus_config();
    let runs = run_many(sampler.as_ref(), &signal, &cfg.sampler_config(), cc.k)?;
    let cps = consensus(&runs, &cc, &window(cfg)?)?;
    let knot_count = {
        let len = runs.iter().map(|r| r.knot_count.len()).max().unwrap_or(0);
        (0..len).map(|i| runs.iter().map(|r| r.knot_count.get(i).copied().unwrap_or(0.0)).sum::<f64>() / runs.len() as f64).collect()
    };
    let detected = Detected { set: cps, knot_count };
    st.write_json(&st.path(CHANGEPOINTS), &detected)?;
    st.write_table(&st.path(POSTERIOR), |w| report::write_posterior(w, &signal, &detected.set))?;
    st.finish()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Detected {
    #[serde(flatten)]
    pub set: ChangepointSet,
    /// Posterior of the number of knots averaged over runs.
    pub knot_count: Vec<f64>,
}

fn epoch_formula(cfg: &PipelineConfig, n_epochs: usize) -> Result<FormulaSpec> {
    let f = &cfg.formulas;
    let d = epoch_model_spec(cfg.epoch_scope, n_epochs);
    match (&f.epoch_mean, &f.epoch_dispersion, f.epoch_family) {
        (None, None, None) => Ok(d),
        (m, disp, fam) => {
            let mean = m.clone().unwrap_or_else(|| d.mean.to_string());
            let disp = disp.clone().unwrap_or_else(|| d.dispersion.to_string());
            FormulaSpec::parse(&mean, &disp, fam.unwrap_or(d.parametrization))
        }
    }
}

pub fn fit_epochs(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "fit-epochs");
    let detected: Detected = read_json(&st.path(CHANGEPOINTS), "detect", &st.hash)?;
    let (table, outlets) = load_ingested(cfg, &st.hash)?;
    let w = window(cfg)?;
    let partition = partition_epochs(&detected.set, &w)?;
    let frame = panel_frame(&table, &outlets, &w, Some(&partition), cfg.epoch_scope, cfg.cell_floor)?;
    for c in &frame.excluded {
        log::warn!("outlet {} epoch {}: {} posts, below the floor of {}", c.outlet_id, c.epoch, c.n_obs, cfg.cell_floor);
    }
    let fit = fit_nb_glmm(&frame.data, "reactions", &epoch_formula(cfg, partition.n_epochs())?, &FitOptions::default())?;
    st.write_json(&st.path(PARTITION), &partition)?;
    st.write_json(&st.path(EPOCH_FIT), &fit)?;
    st.write_table(&st.path(EXCLUDED), |w| write_excluded(w, &frame.excluded))?;
    st.finish()
}

fn write_excluded(w: &mut Vec<u8>, cells: &[ExcludedCell]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["outlet_id", "epoch", "n_obs"])?;
    for c in cells {
        wr.write_record([c.outlet_id.clone(), c.epoch.to_string(), c.n_obs.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn infer(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "infer");
    let fit: GlmmFit = read_json(&st.path(EPOCH_FIT), "fit-epochs", &st.hash)?;
    let summary = summarize_epochs(&fit, &cfg.inference_config())?;
    st.write_json(&st.path(SUMMARY), &summary)?;
    st.write_table(&st.path(EMM_TABLE), |w| report::write_emm(w, &summary))?;
    st.write_table(&st.path(CONTRAST_TABLE), |w| report::write_contrasts(w, &summary))?;
    st.finish()
}

pub fn report(cfg: &PipelineConfig) -> CliResult<()> {
    let mut st = Stage::new(cfg, "report");
    let summary: EpochSummary = read_json(&st.path(SUMMARY), "infer", &st.hash)?;
    let detected: Detected = read_json(&st.path(CHANGEPOINTS), "detect", &st.hash)?;
    let partition: EpochPartition = read_json(&st.path(PARTITION), "fit-epochs", &st.hash)?;
    let fit: GlmmFit = read_json(&st.path(EPOCH_FIT), "fit-epochs", &st.hash)?;
    let signal = load_signal(cfg, &st.hash)?;
    let text = report::render(cfg, &st.hash, &detected, &partition, &fit, &summary);
    st.write_text(&st.path("report/report.md"), &text)?;
    st.write_table(&st.path("report/changepoint_trace.csv"), |w| report::write_posterior(w, &signal, &detected.set))?;
    st.write_table(&st.path("report/changepoints.csv"), |w| report::write_changepoints(w, &detected.set))?;
    st.write_table(&st.path("report/epochs.csv"), |w| report::write_epochs(w, &partition))?;
    st.finish()
}

/// Every stage in order, starting with `simulate` when the configuration has
/// a `[simulate]` section.
pub fn run_all(cfg: &PipelineConfig) -> CliResult<()> {
    if cfg.simulate.is_some() {
        simulate(cfg)?;
    }
    ingest(cfg)?;
    fit_preliminary(cfg)?;
    build_signal(cfg)?;
    detect(cfg)?;
    fit_epochs(cfg)?;
    infer(cfg)?;
    report(cfg)
}
