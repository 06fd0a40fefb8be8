//! Epoch-structured count models and the marginal-mean, contrast and
//! difference-in-difference summaries built on them.

pub mod contrast;
pub mod data;
pub mod emm;
pub mod mvn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Parametrization;
use crate::formula::FormulaSpec;
use crate::glmm::{fit_nb_glmm, FitOptions, GlmmFit};

pub use contrast::{
    contrast, contrast_registry, did_estimate, parallel_trends_test, summarize, total_effect, tier_vs_average,
    ChiSquareTest, ContrastCoding, ContrastEstimate, ContrastKind, EffectCoding, Sequential,
};
pub use data::{outlet_day_moments, panel_frame, ExcludedCell, PanelFrame, Scope};
pub use emm::{emm, EmmCell, EmmGrid, JointEstimates};
pub use mvn::{adjust_family, two_sided_p, FamilyAdjustment};

/// Formulas of the preliminary model used to build the changepoint signal.
pub fn preliminary_spec() -> FormulaSpec {
    let f = "quality + log(n_posts) + (1|outlet) + (1+quality|year:month:day)";
    FormulaSpec::parse(f, f, Parametrization::Nb2Quadratic).expect("valid preliminary formula")
}

/// Formulas of the epoch model for `scope`; with one epoch the epoch terms
/// are dropped and the model reduces to a quality-only fit.
pub fn epoch_model_spec(scope: Scope, n_epochs: usize) -> FormulaSpec {
    let (mean, disp) = match (scope, n_epochs > 1) {
        (Scope::NewsOnly, true) => (
            "quality*epoch + (1|outlet) + (1|outlet:epoch) + (1+quality|year:month:day)",
            "quality*epoch + (1|outlet) + (1|outlet:epoch)",
        ),
        (Scope::NewsOnly, false) => ("quality + (1|outlet) + (1+quality|year:month:day)", "quality + (1|outlet)"),
        (Scope::NewsAndNonnews, true) => (
            "quality*epoch + (1|outlet) + (1|outlet:epoch) + (1|year:month:day)",
            "1 + (1|outlet) + (1|outlet:epoch)",
        ),
        (Scope::NewsAndNonnews, false) => ("quality + (1|outlet) + (1|year:month:day)", "1 + (1|outlet)"),
    };
    FormulaSpec::parse(mean, disp, Parametrization::Nb1Linear).expect("valid epoch formula")
}

/// Fits the epoch model to a frame built with an epoch partition.
pub fn fit_epoch_model(frame: &PanelFrame, scope: Scope, opts: &FitOptions) -> Result<GlmmFit> {
    let n_epochs = match frame.data.factor("epoch") {
        Ok((levels, _)) => levels.len(),
        Err(_) => return Err(Error::Schema("the epoch model needs an `epoch` column".into())),
    };
    fit_nb_glmm(&frame.data, "reactions", &epoch_model_spec(scope, n_epochs), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub alpha: f64,
    /// Mean random-effect groupings integrated out of the EMMs.
    pub marginalize: Vec<String>,
    /// Baseline epochs of the effect-coding contrasts (all when unset).
    pub baseline_epochs: Option<Vec<usize>>,
    /// Epochs whose sequential DiD enters the parallel-trends test
    /// (defaults to the non-initial baseline epochs, or all epochs).
    pub parallel_trends_epochs: Option<Vec<usize>>,
    /// Epoch pair of the total-effect table (defaults to first and last).
    pub total_effect_epochs: Option<(usize, usize)>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            marginalize: vec!["outlet".into(), "outlet:epoch".into()],
            baseline_epochs: None,
            parallel_trends_epochs: None,
            total_effect_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupContrasts {
    pub group: String,
    pub kind: ContrastKind,
    pub estimates: Vec<ContrastEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epochs: Vec<String>,
    pub groups: Vec<String>,
    pub emm: Vec<EmmCell>,
    pub contrasts: Vec<GroupContrasts>,
    pub parallel_trends: Option<ChiSquareTest>,
    pub parallel_trends_epochs: Vec<usize>,
}

const NEWS_TIERS: [&str; 3] = ["low", "medium", "high"];

/// EMMs per quality tier plus a `news` average, family-adjusted sequential
/// and effect-coding contrasts per group, and, when non-news outlets are in
/// the fit, DiD and cumulative DiD ratios with the parallel-trends test.
pub fn summarize_epochs(fit: &GlmmFit, cfg: &InferenceConfig) -> Result<EpochSummary> {
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", cfg.alpha)));
    }
    let marg: Vec<&str> = cfg.marginalize.iter().map(String::as_str).collect();
    let mut grid = emm(fit, &marg)?;
    let tiers: Vec<&str> = NEWS_TIERS.iter().copied().filter(|t| grid.groups.iter().any(|g| g == t)).collect();
    if tiers.len() > 1 {
        grid = grid.with_average("news", &tiers)?;
    }
    let n = grid.epochs.len();
    let baseline = cfg.baseline_epochs.as_deref();
    if let Some(b) = baseline {
        if b.is_empty() || b.iter().any(|&e| e >= n) {
            return Err(Error::Config(format!("baseline epochs {b:?} outside 0..{n}")));
        }
    }
    let mut contrasts = Vec::new();
    if n > 1 {
        for g in &grid.groups {
            let seq = contrast(&grid, g, &Sequential, None)?;
            let eff = contrast(&grid, g, &EffectCoding, baseline)?;
            contrasts.push(GroupContrasts {
                group: g.clone(),
                kind: ContrastKind::Sequential,
                estimates: summarize(&seq, ContrastKind::Sequential, cfg.alpha),
            });
            contrasts.push(GroupContrasts {
                group: g.clone(),
                kind: ContrastKind::EffectCoding,
                estimates: summarize(&eff, ContrastKind::EffectCoding, cfg.alpha),
            });
        }
    }
    let news_group = if tiers.len() > 1 { Some("news") } else { tiers.first().copied() };
    let mut parallel_trends = None;
    let mut pt_epochs = Vec::new();
    if let (Some(news), true, true) = (news_group, grid.groups.iter().any(|g| g == "non_news"), n > 1) {
        let did = did_estimate(&contrast(&grid, news, &Sequential, None)?, &contrast(&grid, "non_news", &Sequential, None)?)?;
        let cum = did_estimate(
            &contrast(&grid, news, &EffectCoding, baseline)?,
            &contrast(&grid, "non_news", &EffectCoding, baseline)?,
        )?;
        pt_epochs = match &cfg.parallel_trends_epochs {
            Some(e) => e.clone(),
            None => match baseline {
                Some(b) => b.iter().copied().filter(|&e| e > 0).collect(),
                None => (1..n).collect(),
            },
        };
        if pt_epochs.iter().any(|&e| e == 0 || e >= n) {
            return Err(Error::Config(format!("parallel-trends epochs {pt_epochs:?} must lie in 1..{n}")));
        }
        if !pt_epochs.is_empty() {
            let idx: Vec<usize> = pt_epochs.iter().map(|e| e - 1).collect();
            parallel_trends = Some(parallel_trends_test(&did.select(&idx)));
        }
        contrasts.push(GroupContrasts {
            group: format!("{news}/non_news"),
            kind: ContrastKind::Did,
            estimates: summarize(&did, ContrastKind::Did, cfg.alpha),
        });
        contrasts.push(GroupContrasts {
            group: format!("{news}/non_news"),
            kind: ContrastKind::CumulativeDid,
            estimates: summarize(&cum, ContrastKind::CumulativeDid, cfg.alpha),
        });
    }
    if n > 1 {
        let (a, b) = cfg.total_effect_epochs.unwrap_or((0, n - 1));
        if a >= n || b >= n {
            return Err(Error::Config(format!("total-effect epochs ({a}, {b}) outside 0..{n}")));
        }
        for g in grid.groups.clone() {
            let reference = (g != "non_news" && grid.groups.iter().any(|x| x == "non_news")).then_some("non_news");
            let mut t = total_effect(&grid, &g, a, b, reference)?;
            if reference.is_some() {
                // Keep the group's own ratio and the causal version.
                t = t.select(&[0, 2]);
            }
            contrasts.push(GroupContrasts {
                group: g.clone(),
                kind: ContrastKind::TotalEffect,
                estimates: summarize(&t, ContrastKind::TotalEffect, cfg.alpha),
            });
        }
        if tiers.len() > 1 {
            let t = tier_vs_average(&grid, &tiers, a, b)?;
            contrasts.push(GroupContrasts {
                group: "tiers".into(),
                kind: ContrastKind::TotalEffect,
                estimates: summarize(&t, ContrastKind::TotalEffect, cfg.alpha),
            });
        }
    }
    Ok(EpochSummary {
        epochs: grid.epochs.clone(),
        groups: grid.groups.clone(),
        emm: grid.cells(cfg.alpha),
        contrasts,
        parallel_trends,
        parallel_trends_epochs: pt_epochs,
    })
}
