//! Report tables: markdown for reading, delimited text for plotting.

use std::fmt::Write as _;

use engshift_core::changepoint::ChangepointSet;
use engshift_core::epoch::EpochPartition;
use engshift_core::glmm::GlmmFit;
use engshift_core::inference::{ContrastKind, EpochSummary};
use engshift_core::signal::WeeklySignal;
use engshift_core::Result;

use crate::commands::Detected;
use crate::config::PipelineConfig;

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn kind_name(k: ContrastKind) -> &'static str {
    match k {
        ContrastKind::Sequential => "sequential",
        ContrastKind::EffectCoding => "effect_coding",
        ContrastKind::Did => "did",
        ContrastKind::CumulativeDid => "cumulative_did",
        ContrastKind::TotalEffect => "total_effect",
    }
}

/// Weekly signal next to the averaged smoothed changepoint posterior.
pub fn write_posterior(w: &mut Vec<u8>, signal: &[WeeklySignal], cps: &ChangepointSet) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["week_index", "week_start", "log_rel_mean", "log_cv", "posterior"])?;
    for (s, p) in signal.iter().zip(&cps.averaged) {
        wr.write_record([s.week_index.to_string(), s.week_start.to_string(), opt(s.log_rel_mean), opt(s.log_cv), num(*p)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_changepoints(w: &mut Vec<u8>, cps: &ChangepointSet) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["index", "timestamp", "lower_bound", "upper_bound", "week", "height"])?;
    for p in &cps.points {
        wr.write_record([
            p.index.to_string(),
            p.timestamp.to_string(),
            p.lower_date.to_string(),
            p.upper_date.to_string(),
            p.week.to_string(),
            num(p.height),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_epochs(w: &mut Vec<u8>, part: &EpochPartition) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "start", "end_exclusive"])?;
    for k in 0..part.n_epochs() {
        let (a, b) = part.bounds(k);
        wr.write_record([k.to_string(), a.to_string(), b.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_emm(w: &mut Vec<u8>, s: &EpochSummary) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["group", "epoch", "emm", "log_emm", "se_log", "ci_low", "ci_high"])?;
    for c in &s.emm {
        wr.write_record([
            c.group.clone(),
            c.epoch.clone(),
            num(c.emm),
            num(c.log_emm),
            num(c.se_log),
            num(c.ci_low),
            num(c.ci_high),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_contrasts(w: &mut Vec<u8>, s: &EpochSummary) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["group", "kind", "label", "ratio", "ci_low", "ci_high", "log_ratio", "se_log", "z", "p_raw", "p_adjusted"])?;
    for g in &s.contrasts {
        for e in &g.estimates {
            wr.write_record([
                g.group.clone(),
                kind_name(g.kind).to_string(),
                e.label.clone(),
                num(e.ratio),
                num(e.ci_low),
                num(e.ci_high),
                num(e.log_ratio),
                num(e.se_log),
                num(e.z),
                num(e.p_raw),
                num(e.p_adjusted),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn p_fmt(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else {
        format!("{p:.3}")
    }
}

/// Markdown report with the changepoint, epoch, EMM and contrast tables.
pub fn render(
    cfg: &PipelineConfig,
    hash: &str,
    detected: &Detected,
    part: &EpochPartition,
    fit: &GlmmFit,
    s: &EpochSummary,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Epoch analysis report\n");
    let _ = writeln!(out, "- config hash: `{hash}`");
    let _ = writeln!(out, "- seed: {}", cfg.seed);
    let _ = writeln!(out, "- window: {} to {} (exclusive)", part.window.start, part.window.end);
    let _ = writeln!(out, "- changepoints: {}", detected.set.points.len());
    let _ = writeln!(out, "- epochs: {}", part.n_epochs());
    let _ = writeln!(out, "- epoch model: `{}` with dispersion `{}`", fit.formula.mean, fit.formula.dispersion);
    let _ = writeln!(out, "- observations: {}, converged: {}\n", fit.n_obs, fit.converged);

    let _ = writeln!(out, "## Changepoints\n");
    let _ = writeln!(out, "| index | timestamp | lower bound | upper bound | height |");
    let _ = writeln!(out, "|---:|---|---|---|---:|");
    for p in &detected.set.points {
        let _ = writeln!(out, "| {} | {} | {} | {} | {:.3} |", p.index, p.timestamp, p.lower_date, p.upper_date, p.height);
    }

    let _ = writeln!(out, "\n## Epochs\n");
    let _ = writeln!(out, "| epoch | start | end |");
    let _ = writeln!(out, "|---:|---|---|");
    for k in 0..part.n_epochs() {
        let (a, b) = part.bounds(k);
        let _ = writeln!(out, "| {k} | {a} | {b} |");
    }

    let _ = writeln!(out, "\n## Estimated marginal means\n");
    let mut header = String::from("| group |");
    let mut rule = String::from("|---|");
    for e in &s.epochs {
        let _ = write!(header, " epoch {e} |");
        rule.push_str("---:|");
    }
    let _ = writeln!(out, "{header}\n{rule}");
    for g in &s.groups {
        let mut row = format!("| {g} |");
        for e in &s.epochs {
            if let Some(c) = s.emm.iter().find(|c| &c.group == g && &c.epoch == e) {
                let _ = write!(row, " {:.2} [{:.2}, {:.2}] |", c.emm, c.ci_low, c.ci_high);
            }
        }
        let _ = writeln!(out, "{row}");
    }

    for g in &s.contrasts {
        let _ = writeln!(out, "\n## {} contrasts: {}\n", kind_name(g.kind), g.group);
        let _ = writeln!(out, "| contrast | ratio | {:.0}% simultaneous CI | p | p adjusted |", 100.0 * (1.0 - cfg.alpha));
        let _ = writeln!(out, "|---|---:|---|---:|---:|");
        for e in &g.estimates {
            let _ = writeln!(
                out,
                "| {} | {:.3} | [{:.3}, {:.3}] | {} | {} |",
                e.label,
                e.ratio,
                e.ci_low,
                e.ci_high,
                p_fmt(e.p_raw),
                p_fmt(e.p_adjusted)
            );
        }
    }

    if let Some(t) = &s.parallel_trends {
        let _ = writeln!(out, "\n## Parallel trends\n");
        let _ = writeln!(
            out,
            "Wald chi-square over epochs {:?}: statistic {:.3}, df {}, p {}{}",
            s.parallel_trends_epochs,
            t.statistic,
            t.df,
            p_fmt(t.p),
            if t.pseudo_inverse { " (pseudo-inverse)" } else { "" }
        );
    }
    out
}
