//! Run configuration: a flat TOML file of typed keys, every one optional.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arguments::ArgumentConfig;
use crate::corpus::{power_law_counts, SyntheticConfig};
use crate::detection::{DetectionTrainConfig, DistillationConfig, PseudoLabelConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Replay, pseudo labels, distillation and prototype enhancement.
    #[default]
    Full,
    /// Plain training on the current task only.
    FineTuning,
    /// Fresh model on all accumulated gold data each stage.
    JointTraining,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Full => "full",
            Strategy::FineTuning => "fine-tuning",
            Strategy::JointTraining => "joint-training",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// JSON-lines corpus; the synthetic generator is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,

    pub synthetic_types: usize,
    pub synthetic_max_count: usize,
    pub synthetic_min_count: usize,
    pub synthetic_vocab: usize,
    pub synthetic_seed: u64,
    pub synthetic_multi_type_prob: f64,
    pub synthetic_trigger_words: usize,
    pub synthetic_arguments: bool,

    pub k: usize,
    pub memory_size: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Final encoder layers averaged into the context attention.
    pub attn_layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,

    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,

    pub arguments: bool,
    pub arg_lr: f64,
    pub arg_epochs: usize,
    pub arg_feature_dim: usize,
    pub arg_gru_hidden: usize,

    pub strategy: Strategy,
    pub da: bool,
    pub afd: bool,
    pub spd: bool,
    pub pkd: bool,
    pub pkt: bool,

    pub permutation_seed: u64,
    pub model_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            schema: None,
            synthetic_types: 20,
            synthetic_max_count: 200,
            synthetic_min_count: 5,
            synthetic_vocab: 200,
            synthetic_seed: 0,
            synthetic_multi_type_prob: 0.3,
            synthetic_trigger_words: 3,
            synthetic_arguments: true,
            k: 5,
            memory_size: 10,
            tau: 0.8,
            alpha: 1.0,
            beta: 1.0,
            attn_layers: 3,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 8,
            feature_dim: 512,
            epochs: 8,
            warmup_epochs: 1,
            n_layers: 3,
            n_heads: 2,
            hidden_dim: 32,
            ffn_dim: 64,
            max_len: 64,
            arguments: true,
            arg_lr: 1e-3,
            arg_epochs: 8,
            arg_feature_dim: 64,
            arg_gru_hidden: 32,
            strategy: Strategy::Full,
            da: true,
            afd: true,
            spd: true,
            pkd: true,
            pkt: true,
            permutation_seed: 0,
            model_seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail("tau must lie in (0, 1]");
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail("alpha and beta must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(self.lr > 0.0 && self.arg_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.arg_epochs == 0 {
            return fail("batch size and epoch counts must be positive");
        }
        if self.feature_dim == 0 || self.arg_feature_dim == 0 || self.arg_gru_hidden == 0 {
            return fail("feature dimensions must be positive");
        }
        if self.corpus.is_none() && self.synthetic_min_count > self.synthetic_max_count {
            return fail("synthetic_min_count exceeds synthetic_max_count");
        }
        if self.corpus.is_none() && self.synthetic_trigger_words == 0 {
            return fail("synthetic_trigger_words must be positive");
        }
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d: self.hidden_dim,
            attn_layers: self.attn_layers,
            ffn_dim: self.ffn_dim,
            dropout_rate: self.dropout,
            max_len: self.max_len,
            seed: self.model_seed,
            ..EncoderConfig::default()
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        let counts = power_law_counts(self.synthetic_types, self.synthetic_max_count, self.synthetic_min_count);
        let mut s = SyntheticConfig::new(counts, self.synthetic_vocab, self.synthetic_seed);
        s.multi_type_prob = self.synthetic_multi_type_prob;
        s.with_arguments = self.synthetic_arguments;
        s.trigger_words_per_type = self.synthetic_trigger_words;
        s.max_len = s.max_len.min(self.max_len);
        s.min_len = s.min_len.min(s.max_len);
        s
    }

    /// Detection training settings after applying strategy and ablations.
    pub fn detection_config(&self) -> DetectionTrainConfig {
        let full = self.strategy == Strategy::Full;
        DetectionTrainConfig {
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            pseudo: PseudoLabelConfig { tau: self.tau },
            distill: DistillationConfig {
                alpha: self.alpha,
                beta: self.beta,
            },
            use_pseudo_labels: full && self.da,
            use_afd: full && self.pkd && self.afd,
            use_spd: full && self.pkd && self.spd,
            use_prototypes: full && self.pkt,
            memory_size: if full { self.memory_size } else { 0 },
            seed: self.model_seed,
        }
    }

    pub fn argument_config(&self) -> ArgumentConfig {
        ArgumentConfig {
            feature_dim: self.arg_feature_dim,
            gru_hidden: self.arg_gru_hidden,
            epochs: self.arg_epochs,
            batch_size: self.batch_size,
            lr: self.arg_lr,
            memory_size: if self.strategy == Strategy::Full { self.memory_size } else { 0 },
            seed: self.model_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
        assert_eq!((cfg.tau, cfg.alpha, cfg.beta, cfg.attn_layers), (0.8, 1.0, 1.0, 3));
        assert_eq!((cfg.dropout, cfg.batch_size, cfg.feature_dim, cfg.memory_size), (0.2, 8, 512, 10));
    }

    #[test]
    fn partial_file_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "strategy = \"fine-tuning\"\ntau = 0.9\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.strategy, Strategy::FineTuning);
        assert_eq!(cfg.tau, 0.9);
        assert_eq!(cfg.k, 5);
        fs::write(&path, "tua = 0.9\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
        fs::write(&path, "tau = 1.5\n").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn strategy_switches() {
        let mut cfg = RunConfig::default();
        let d = cfg.detection_config();
        assert!(d.use_pseudo_labels && d.use_afd && d.use_spd && d.use_prototypes && d.memory_size == 10);
        cfg.pkd = false;
        let d = cfg.detection_config();
        assert!(!d.use_afd && !d.use_spd && d.use_pseudo_labels);
        cfg.strategy = Strategy::FineTuning;
        let d = cfg.detection_config();
        assert!(!d.use_pseudo_labels && !d.use_prototypes && d.memory_size == 0);
        assert_eq!(cfg.argument_config().memory_size, 0);
    }
}
