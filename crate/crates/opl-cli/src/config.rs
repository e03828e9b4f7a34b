//! Sweep configuration: a TOML file with `[dataset]`, `[logging]`, `[train]`
//! and `[run]` sections. Command-line flags override file values. The fully
//! resolved configuration is embedded as a comment line in every output file
//! so a run can be reproduced from its artifacts alone.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dataset: DatasetSection,
    pub logging: LoggingSection,
    pub train: TrainSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "blobs", "csv" or "fig1".
    pub source: String,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_class_sep")]
    pub class_sep: f64,
    #[serde(default = "default_noise_sd")]
    pub noise_sd: f64,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    /// Supervised CSV paths for source = "csv".
    pub path: Option<String>,
    pub test_path: Option<String>,
}

fn default_k() -> usize {
    10
}
fn default_d() -> usize {
    20
}
fn default_n() -> usize {
    20_000
}
fn default_class_sep() -> f64 {
    4.0
}
fn default_noise_sd() -> f64 {
    1.0
}
fn default_test_n() -> usize {
    4000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingSection {
    pub eta0: Vec<f64>,
    #[serde(default = "default_split_frac")]
    pub split_frac: f64,
}

fn default_split_frac() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Any of "ours", "london", "sakhi1", "sakhi2", "lp".
    pub objectives: Vec<String>,
    /// Any of "softmax", "gaussian", "mixed_logit".
    pub policy_classes: Vec<String>,
    /// Numbers as strings, "paper-default" (1 - n^(-1/4)) or "adaptive".
    #[serde(default = "default_alpha_list")]
    pub alpha: Vec<String>,
    /// Numbers as strings or "paper-default" (n^(-1/4)).
    #[serde(default = "default_tau_list")]
    pub tau: Vec<String>,
    #[serde(default = "default_lp_lambdas")]
    pub lp_lambdas: [f64; 3],
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_s")]
    pub s: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// 0 = full batch.
    #[serde(default)]
    pub batch_size: usize,
}

fn default_alpha_list() -> Vec<String> {
    vec!["paper-default".into()]
}
fn default_tau_list() -> Vec<String> {
    vec!["paper-default".into()]
}
fn default_lp_lambdas() -> [f64; 3] {
    [1e-5, 1e-5, 1e-5]
}
fn default_epochs() -> usize {
    20
}
fn default_lr() -> f64 {
    0.1
}
fn default_s() -> usize {
    32
}
fn default_delta() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: String,
    #[serde(default)]
    pub global_seed: u64,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: SweepConfig = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.dataset.source.as_str(), "blobs" | "csv" | "fig1") {
            bail!("dataset.source must be one of blobs/csv/fig1");
        }
        if self.dataset.source == "csv" && self.dataset.path.is_none() {
            bail!("dataset.path is required for source = \"csv\"");
        }
        if self.logging.eta0.is_empty()
            || self.train.objectives.is_empty()
            || self.train.policy_classes.is_empty()
            || self.run.seeds.is_empty()
        {
            bail!("eta0, objectives, policy_classes and seeds must be nonempty");
        }
        for o in &self.train.objectives {
            if !matches!(o.as_str(), "ours" | "london" | "sakhi1" | "sakhi2" | "lp") {
                bail!("unknown objective `{o}`");
            }
        }
        for c in &self.train.policy_classes {
            if !matches!(c.as_str(), "softmax" | "gaussian" | "mixed_logit") {
                bail!("unknown policy class `{c}`");
            }
        }
        for a in &self.train.alpha {
            if a != "paper-default" && a != "adaptive" && a.parse::<f64>().is_err() {
                bail!("alpha entries must be numbers, \"paper-default\" or \"adaptive\"");
            }
        }
        for t in &self.train.tau {
            if t != "paper-default" && t.parse::<f64>().is_err() {
                bail!("tau entries must be numbers or \"paper-default\"");
            }
        }
        Ok(())
    }

    /// One-line JSON echo of the resolved configuration for provenance
    /// comments.
    pub fn provenance(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
