//! Pipeline configuration file and its hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use engshift_core::changepoint::{ConsensusConfig, SamplerConfig};
use engshift_core::family::Parametrization;
use engshift_core::ingest::{PostType, Quality};
use engshift_core::inference::{InferenceConfig, Scope};
use engshift_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub posts: PathBuf,
    pub outlets: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub start: NaiveDate,
    /// Exclusive.
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cleaning {
    pub delimiter: char,
    /// Logical field name to input header, for inputs with other headers.
    pub columns: BTreeMap<String, String>,
    pub allowed_types: Vec<PostType>,
    pub require_page_author: bool,
    /// Fill missing reactions from views.
    pub impute: bool,
}

impl Default for Cleaning {
    fn default() -> Self {
        Self {
            delimiter: ',',
            columns: BTreeMap::new(),
            allowed_types: vec![PostType::Status, PostType::Link, PostType::Photo, PostType::Video],
            require_page_author: true,
            impute: true,
        }
    }
}

/// Optional formula overrides; unset entries use the built-in models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Formulas {
    pub preliminary_mean: Option<String>,
    pub preliminary_dispersion: Option<String>,
    pub preliminary_family: Option<Parametrization>,
    pub epoch_mean: Option<String>,
    pub epoch_dispersion: Option<String>,
    pub epoch_family: Option<Parametrization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Detect {
    /// Registered sampler name.
    pub sampler: String,
    pub min_order: u8,
    pub max_order: u8,
    pub max_knots: usize,
    pub min_separation: usize,
    pub outliers: bool,
    pub burn_in: usize,
    pub samples: usize,
    pub thinning: usize,
    pub k: usize,
    pub l: usize,
    pub p_min: f64,
}

impl Default for Detect {
    fn default() -> Self {
        let s = SamplerConfig::default();
        let c = ConsensusConfig::default();
        Self {
            sampler: "rjmcmc".into(),
            min_order: s.trend_min_order,
            max_order: s.trend_max_order,
            max_knots: s.max_knots,
            min_separation: s.min_knot_separation,
            outliers: s.outlier_component,
            burn_in: s.mcmc.burn_in,
            samples: s.mcmc.samples,
            thinning: s.mcmc.thinning,
            k: c.k,
            l: c.l,
            p_min: c.p_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inference {
    pub marginalize: Vec<String>,
    pub baseline_epochs: Option<Vec<usize>>,
    pub parallel_trends_epochs: Option<Vec<usize>>,
    pub total_effect_epochs: Option<(usize, usize)>,
}

impl Default for Inference {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            marginalize: d.marginalize,
            baseline_epochs: d.baseline_epochs,
            parallel_trends_epochs: d.parallel_trends_epochs,
            total_effect_epochs: d.total_effect_epochs,
        }
    }
}

/// Ground truth of the `simulate` command; the panel starts on the window
/// start and uses the pipeline seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Simulate {
    pub n_outlets: usize,
    /// Day offsets at which epochs 1, 2, ... begin.
    pub changepoints: Vec<usize>,
    pub groups: Vec<Quality>,
    /// `[group][epoch]` log mean reactions per post.
    pub log_mean: Vec<Vec<f64>>,
    #[serde(default)]
    pub did_log: Vec<f64>,
    pub sd_outlet: f64,
    pub sd_outlet_epoch: f64,
    pub sd_day: f64,
    pub parametrization: Parametrization,
    pub phi: f64,
    pub posts_per_day: f64,
    #[serde(default)]
    pub rate_sd: f64,
    #[serde(default)]
    pub views_per_reaction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Outlet-epoch cells with fewer posts are left out of the epoch model.
    #[serde(default = "default_cell_floor")]
    pub cell_floor: usize,
    #[serde(default = "default_preliminary_scope")]
    pub preliminary_scope: Scope,
    #[serde(default = "default_epoch_scope")]
    pub epoch_scope: Scope,
    pub paths: Paths,
    pub window: Window,
    #[serde(default)]
    pub cleaning: Cleaning,
    #[serde(default)]
    pub formulas: Formulas,
    #[serde(default)]
    pub detect: Detect,
    #[serde(default)]
    pub inference: Inference,
    pub simulate: Option<Simulate>,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_cell_floor() -> usize {
    20
}

fn default_preliminary_scope() -> Scope {
    Scope::NewsOnly
}

fn default_epoch_scope() -> Scope {
    Scope::NewsAndNonnews
}

impl PipelineConfig {
    /// Reads `path`; relative paths inside are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.posts, &mut cfg.paths.outlets, &mut cfg.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.window.end <= self.window.start {
            return Err(Error::Config("window end must be after its start".into()));
        }
        if !self.cleaning.delimiter.is_ascii() {
            return Err(Error::Config("delimiter must be a single ASCII character".into()));
        }
        self.sampler_config().validate()?;
        self.consensus_config().validate()
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let d = &self.detect;
        SamplerConfig {
            trend_min_order: d.min_order,
            trend_max_order: d.max_order,
            max_knots: d.max_knots,
            min_knot_separation: d.min_separation,
            outlier_component: d.outliers,
            delta_time: 1.0 / 52.0,
            mcmc: engshift_core::changepoint::sampler::McmcConfig { burn_in: d.burn_in, samples: d.samples, thinning: d.thinning },
            seed: self.seed,
        }
    }

    pub fn consensus_config(&self) -> ConsensusConfig {
        ConsensusConfig { k: self.detect.k, l: self.detect.l, p_min: self.detect.p_min }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        let i = &self.inference;
        InferenceConfig {
            alpha: self.alpha,
            marginalize: i.marginalize.clone(),
            baseline_epochs: i.baseline_epochs.clone(),
            parallel_trends_epochs: i.parallel_trends_epochs.clone(),
            total_effect_epochs: i.total_effect_epochs,
        }
    }

    /// SHA-256 of the canonical JSON form of everything except the paths, so
    /// that the same analysis written to another directory hashes the same.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("paths");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[paths]
posts = "posts.csv"
outlets = "outlets.csv"
output_dir = "out"
[window]
start = "2020-01-06"
end = "2021-01-04"
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.cell_floor, 20);
        assert_eq!(cfg.detect.k, 1000);
        assert_eq!(cfg.sampler_config().seed, 3);
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.paths.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.alpha = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_and_bad_alpha_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>(&format!("{MINIMAL}\nbogus = 1")).is_err());
        let mut cfg: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        cfg.alpha = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
