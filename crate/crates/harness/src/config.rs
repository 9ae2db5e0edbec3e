//! Run configuration: a TOML tree with `[model]`, `[train]`, `[data]`,
//! `[text]` and `[eval]` tables. Every key has a default and any key can be
//! overridden with `--set table.key=value`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use viconex_core::metrics::XaiConfig;
use viconex_core::{LossMode, LossWeights, ModelConfig};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub weights: LossWeights,
    /// Probability of a horizontal flip per training image.
    pub flip_prob: f64,
    /// Write the per-step log every `log_every` steps; 1 logs every step.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            loss_mode: LossMode::Separate,
            weights: LossWeights::default(),
            flip_prob: 0.5,
            log_every: 1,
        }
    }
}

/// Extra training directory sampled alongside `data.train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSource {
    pub path: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Sampling weight of `train` when `mix` is non-empty.
    pub train_weight: f64,
    pub mix: Vec<MixSource>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("data/train"),
            val: Some(PathBuf::from("data/val")),
            test: Some(PathBuf::from("data/test")),
            train_weight: 1.0,
            mix: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Embedding file (`C D_k` header, one row per concept). Synthetic
    /// orthonormal rows from `seed` when absent.
    pub embeddings: Option<PathBuf>,
    pub seed: u64,
    /// One description per concept, in dataset concept order.
    pub descriptions: Vec<String>,
}

impl Default for TextConfig {
    fn default() -> Self {
        let d = |c: &str| format!("a region of {c} color inside a skin lesion");
        Self {
            embeddings: None,
            seed: 7,
            descriptions: vec![
                d("light brown"),
                d("dark brown"),
                d("black"),
                d("blue-gray"),
                d("red"),
                d("white"),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Threshold for the headline Dice and CL-Score.
    pub tau: f64,
    /// Thresholds of the Dice sweep.
    pub taus: Vec<f64>,
    pub batch_size: usize,
    pub xai: XaiConfig,
    /// Images used for Selectivity and Continuity; all when absent.
    pub xai_images: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            taus: vec![0.3, 0.4, 0.5, 0.6],
            batch_size: 16,
            xai: XaiConfig::default(),
            xai_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub text: TextConfig,
    pub eval: EvalConfig,
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Parses the right-hand side of `--set`: a TOML literal when it parses as
/// one, a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to a TOML tree, creating tables as needed.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("malformed key {key:?}")));
    }
    let mut table = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("{key:?}: {p:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional TOML file, applies overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(config_err(format!("train.lr must be > 0, got {}", t.lr)));
        }
        if t.batch_size == 0 || t.log_every == 0 {
            return Err(config_err("train.batch_size and train.log_every must be >= 1"));
        }
        if !(t.weight_decay >= 0.0 && (0.0..1.0).contains(&t.beta1) && (0.0..1.0).contains(&t.beta2)) {
            return Err(config_err("optimizer needs weight_decay >= 0 and betas in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&t.flip_prob) {
            return Err(config_err("train.flip_prob must lie in [0, 1]"));
        }
        t.weights.validate()?;
        if self.data.mix.iter().any(|m| !(m.weight >= 0.0)) || !(self.data.train_weight >= 0.0) {
            return Err(config_err("sampling weights must be >= 0"));
        }
        let e = &self.eval;
        if e.taus.is_empty() || e.taus.iter().chain([&e.tau]).any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(config_err("eval thresholds must lie in (0, 1)"));
        }
        if e.batch_size == 0 {
            return Err(config_err("eval.batch_size must be >= 1"));
        }
        if !(e.xai.step_fraction > 0.0 && e.xai.step_fraction <= 1.0) {
            return Err(config_err("eval.xai.step_fraction must lie in (0, 1]"));
        }
        if e.xai.continuity_shift >= self.model.patch_size {
            return Err(config_err("eval.xai.continuity_shift must be smaller than the patch size"));
        }
        if self.text.descriptions.len() != self.model.concepts {
            return Err(config_err(format!(
                "{} text descriptions for {} concepts",
                self.text.descriptions.len(),
                self.model.concepts
            )));
        }
        Ok(())
    }

    /// Training directories exist.
    pub fn check_train_paths(&self) -> Result<()> {
        let mut paths = vec![&self.data.train];
        paths.extend(self.data.val.iter());
        paths.extend(self.data.mix.iter().map(|m| &m.path));
        for p in paths {
            if !p.is_dir() {
                return Err(HarnessError::Data(format!("dataset directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_strings() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.lr=1e-3").unwrap();
        apply_override(&mut t, "model.variant=baseline").unwrap();
        apply_override(&mut t, "eval.taus=[0.2, 0.7]").unwrap();
        apply_override(&mut t, "data.val=\"v\"").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.model.variant, viconex_core::Variant::Baseline);
        assert_eq!(cfg.eval.taus, vec![0.2, 0.7]);
        assert_eq!(cfg.data.val, Some(PathBuf::from("v")));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let mut t = toml::Table::new();
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "a..b=1").is_err());
        let e = RunConfig::load(None, &["train.nope=1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::load(None, &["train.lr=-1".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunConfig::load(None, &["model.heads=3".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
