//! Run configuration: flat `key = value` files, defaults, and the semantic
//! hash stored in checkpoints to guard resumes.
//!
//! Precedence is command-line flags over file values over defaults; the CLI
//! applies flag overrides after [`RunConfig::from_file`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{LossWeights, TrainMode};
use crate::nets::{CriticKind, ModelConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {0}")]
    Unreadable(String),
    #[error("malformed line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key}: {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Everything a run needs: corpus geometry, mode, optimizer, budgets, paths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus_root: Option<PathBuf>,
    pub split_file: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
    pub style_k: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub ckpt_every: u64,
    pub model_preset: ModelPreset,
    pub eval_runs: usize,
    pub htr_steps: u64,
}

/// Which width preset the sub-models use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Desk,
    Smoke,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus_root: None,
            split_file: None,
            height: 64,
            width: 216,
            style_k: 15,
            seed: 0,
            mode: TrainMode::Baseline,
            steps: 1000,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            ckpt_every: 0,
            model_preset: ModelPreset::Desk,
            eval_runs: 1,
            htr_steps: 300,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "corpus.root" => self.corpus_root = Some(PathBuf::from(value)),
            "corpus.split" => self.split_file = Some(PathBuf::from(value)),
            "corpus.height" => self.height = value.parse().map_err(|_| bad("usize"))?,
            "corpus.width" => self.width = value.parse().map_err(|_| bad("usize"))?,
            "corpus.style_k" => self.style_k = value.parse().map_err(|_| bad("usize"))?,
            "corpus.seed" => self.seed = value.parse().map_err(|_| bad("u64"))?,
            "train.mode" => self.mode = value.parse().map_err(|e: String| bad(&e))?,
            "train.steps" => self.steps = value.parse().map_err(|_| bad("u64"))?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad("usize"))?,
            "train.ckpt_every" => self.ckpt_every = value.parse().map_err(|_| bad("u64"))?,
            "optim.lr" => self.lr = value.parse().map_err(|_| bad("f64"))?,
            "optim.beta1" => self.beta1 = value.parse().map_err(|_| bad("f64"))?,
            "optim.beta2" => self.beta2 = value.parse().map_err(|_| bad("f64"))?,
            "loss.w_d" => self.weights.d_global = value.parse().map_err(|_| bad("f64"))?,
            "loss.w_writer" => self.weights.writer = value.parse().map_err(|_| bad("f64"))?,
            "loss.w_rec" => self.weights.recognizer = value.parse().map_err(|_| bad("f64"))?,
            "loss.w_local" => self.weights.d_local = value.parse().map_err(|_| bad("f64"))?,
            "model.preset" => {
                self.model_preset = match value {
                    "desk" => ModelPreset::Desk,
                    "smoke" => ModelPreset::Smoke,
                    _ => return Err(bad("desk|smoke")),
                }
            }
            "eval.runs" => self.eval_runs = value.parse().map_err(|_| bad("usize"))?,
            "eval.htr_steps" => self.htr_steps = value.parse().map_err(|_| bad("u64"))?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| ConfigError::Unreadable(path.display().to_string()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Malformed { line: i + 1 });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Structural model configuration implied by this run config.
    pub fn model_config(&self, n_writers: usize) -> ModelConfig {
        let mut mc = match self.model_preset {
            ModelPreset::Desk => ModelConfig::desk(n_writers),
            ModelPreset::Smoke => ModelConfig::smoke(n_writers),
        };
        mc.height = self.height;
        mc.width = self.width;
        mc.critic_kind = match self.mode {
            TrainMode::Baseline => CriticKind::None,
            TrainMode::Naive | TrainMode::Centered => CriticKind::Unconditional,
            TrainMode::Smart => CriticKind::Conditional,
        };
        mc
    }

    /// Hash of the fields that define training semantics. Paths and the step
    /// budget are excluded so a run can be resumed from another directory or
    /// extended, but geometry, mode, seed and optimizer settings are pinned.
    pub fn semantic_hash(&self) -> String {
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        fields.insert("height", self.height.to_string());
        fields.insert("width", self.width.to_string());
        fields.insert("style_k", self.style_k.to_string());
        fields.insert("seed", self.seed.to_string());
        fields.insert("mode", self.mode.to_string());
        fields.insert("batch_size", self.batch_size.to_string());
        fields.insert("lr", format!("{:e}", self.lr));
        fields.insert("beta1", format!("{:e}", self.beta1));
        fields.insert("beta2", format!("{:e}", self.beta2));
        fields.insert("w_d", format!("{:e}", self.weights.d_global));
        fields.insert("w_writer", format!("{:e}", self.weights.writer));
        fields.insert("w_rec", format!("{:e}", self.weights.recognizer));
        fields.insert("w_local", format!("{:e}", self.weights.d_local));
        fields.insert("preset", format!("{:?}", self.model_preset));
        let canonical: String = fields
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "# geometry").unwrap();
        writeln!(f, "corpus.height = 32").unwrap();
        writeln!(f, "corpus.width = 108").unwrap();
        writeln!(f, "corpus.style_k = 4").unwrap();
        writeln!(f, "train.mode = smart").unwrap();
        writeln!(f, "optim.lr = 1e-3").unwrap();
        drop(f);
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.height, 32);
        assert_eq!(cfg.width, 108);
        assert_eq!(cfg.style_k, 4);
        assert_eq!(cfg.mode, TrainMode::Smart);
        assert_eq!(cfg.lr, 1e-3);
        // untouched keys keep defaults
        assert_eq!(cfg.batch_size, 4);
    }

    #[test]
    fn flag_style_overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "train.steps = 100\n").unwrap();
        let mut cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.steps, 100);
        cfg.set("train.steps", "7").unwrap(); // simulated --steps 7
        assert_eq!(cfg.steps, 7);
    }

    #[test]
    fn bad_input_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.set("nope.key", "1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            cfg.set("corpus.height", "tall"),
            Err(ConfigError::BadValue { .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "no equals sign here\n").unwrap();
        assert!(matches!(
            RunConfig::from_file(&path),
            Err(ConfigError::Malformed { line: 1 })
        ));
    }

    #[test]
    fn semantic_hash_pins_training_fields_only() {
        let base = RunConfig::default();
        let mut other = base.clone();
        other.steps = 999; // budget excluded
        other.corpus_root = Some(PathBuf::from("/elsewhere"));
        assert_eq!(base.semantic_hash(), other.semantic_hash());

        let mut changed = base.clone();
        changed.seed = 1;
        assert_ne!(base.semantic_hash(), changed.semantic_hash());
        let mut changed = base.clone();
        changed.mode = TrainMode::Naive;
        assert_ne!(base.semantic_hash(), changed.semantic_hash());
    }

    #[test]
    fn model_config_tracks_mode_and_geometry() {
        let mut cfg = RunConfig::default();
        cfg.set("train.mode", "smart").unwrap();
        cfg.set("corpus.height", "32").unwrap();
        cfg.set("corpus.width", "108").unwrap();
        cfg.set("model.preset", "smoke").unwrap();
        let mc = cfg.model_config(2);
        assert_eq!(mc.critic_kind, CriticKind::Conditional);
        assert_eq!((mc.height, mc.width), (32, 108));
        assert_eq!(mc.n_writers, 2);
    }
}
