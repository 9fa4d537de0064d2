//! Run configuration: a TOML file with `[run]`, `[train]`, `[data]`,
//! `[model]`, `[ablation]` and `[pretrain]` sections. Every key is optional
//! and falls back to the desk defaults; unknown keys are rejected.

use std::path::PathBuf;

use ptat::baselines::StrategyTag;
use ptat::continual::{PretrainConfig, TrainConfig};
use ptat::data::SequenceConfig;
use ptat::encoder::EncoderConfig;
use ptat::losses::{DistillToggles, LossWeights};
use ptat::model::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", .0.iter().map(|m| format!("  - {m}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub strategies: Vec<StrategyTag>,
    pub seeds: Vec<u64>,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { strategies: vec![StrategyTag::Ptat], seeds: vec![0], out: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda: t.weights.lambda,
            alpha: t.weights.alpha,
            tau: t.weights.tau,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_domains: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub overlap: f64,
    pub latent_dim: usize,
    pub basis_dim: usize,
    pub basis_seed: u64,
    pub noise_sigma: f64,
    pub text_len: usize,
    pub vocab_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SequenceConfig::default();
        Self {
            num_domains: s.num_domains,
            num_train: s.num_train,
            num_test: s.num_test,
            overlap: s.overlap,
            latent_dim: s.latent_dim,
            basis_dim: s.basis_dim,
            basis_seed: s.basis_seed,
            noise_sigma: s.noise_sigma,
            text_len: s.text_len,
            vocab_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub shared_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub audio_layers: usize,
    pub text_layers: usize,
    pub num_prompts: usize,
    pub lora_rank: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embed_dim: m.audio.embed_dim,
            shared_dim: m.audio.shared_dim,
            num_heads: m.audio.num_heads,
            mlp_hidden: m.audio.mlp_hidden,
            audio_layers: m.audio.num_layers,
            text_layers: m.text.num_layers,
            num_prompts: m.num_prompts,
            lora_rank: m.lora_rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// 1-based audio layer receiving the coupled prompts.
    pub inject_layer: usize,
    pub feature_distillation: bool,
    pub similarity_distillation: bool,
    /// Permutation of `0..num_domains`; empty keeps the natural order.
    pub order: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { inject_layer: 1, feature_distillation: true, similarity_distillation: true, order: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub ablation: AblationSection,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Collects every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        if self.run.strategies.is_empty() {
            errs.push("run.strategies: at least one strategy is required".to_string());
        }
        if self.run.seeds.is_empty() {
            errs.push("run.seeds: at least one seed is required".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.run.strategies {
            if !seen.insert(*s) {
                errs.push(format!("run.strategies: `{s}` listed twice"));
            }
        }
        let mut seeds = std::collections::BTreeSet::new();
        for s in &self.run.seeds {
            if !seeds.insert(*s) {
                errs.push(format!("run.seeds: {s} listed twice"));
            }
        }
        if let Err(e) = self.train_config(0).validate() {
            errs.push(format!("train: {e}"));
        }
        if let Err(e) = self.sequence_config(0).validate() {
            errs.push(format!("data: {e}"));
        }
        if self.data.vocab_size < 2 {
            errs.push("data.vocab_size: must be at least 2".to_string());
        }
        if self.data.num_test < 2 {
            errs.push("data.num_test: must be at least 2".to_string());
        }
        if !self.ablation.order.is_empty() {
            let mut sorted = self.ablation.order.clone();
            sorted.sort_unstable();
            if sorted != (0..self.data.num_domains).collect::<Vec<_>>() {
                errs.push(format!(
                    "ablation.order: {:?} is not a permutation of 0..{}",
                    self.ablation.order, self.data.num_domains
                ));
            }
        }
        if !(1..=3).contains(&self.ablation.inject_layer) {
            errs.push(format!("ablation.inject_layer: {} not in {{1, 2, 3}}", self.ablation.inject_layer));
        } else if let Err(e) = self.model_config().validate() {
            errs.push(format!("model: {e}"));
        }
        if self.pretrain.batch_size < 2 {
            errs.push("pretrain.batch_size: must be at least 2".to_string());
        }
        if !(self.pretrain.learning_rate > 0.0 && self.pretrain.learning_rate.is_finite()) {
            errs.push("pretrain.learning_rate: must be positive".to_string());
        }
        if self.pretrain.num_train == 0 {
            errs.push("pretrain.num_train: must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weights: LossWeights { lambda: t.lambda, alpha: t.alpha, tau: t.tau },
            seed,
            distill: DistillToggles {
                feature: self.ablation.feature_distillation,
                similarity: self.ablation.similarity_distillation,
            },
        }
    }

    pub fn sequence_config(&self, seed: u64) -> SequenceConfig {
        let d = &self.data;
        SequenceConfig {
            num_domains: d.num_domains,
            num_train: d.num_train,
            num_test: d.num_test,
            overlap: d.overlap,
            latent_dim: d.latent_dim,
            basis_dim: d.basis_dim,
            basis_seed: d.basis_seed,
            noise_sigma: d.noise_sigma,
            text_len: d.text_len,
            seed,
        }
    }

    /// Desk encoder geometry with the configured widths; sequence capacity
    /// is sized for the patches or tokens plus every prompt slot.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let base = ModelConfig::default();
        let audio = EncoderConfig {
            embed_dim: m.embed_dim,
            num_layers: m.audio_layers,
            num_heads: m.num_heads,
            mlp_hidden: m.mlp_hidden,
            shared_dim: m.shared_dim,
            ..base.audio
        };
        let audio = EncoderConfig { max_seq_len: audio.num_patches() + m.num_prompts, ..audio };
        let text = EncoderConfig {
            embed_dim: m.embed_dim,
            num_layers: m.text_layers,
            num_heads: m.num_heads,
            mlp_hidden: m.mlp_hidden,
            shared_dim: m.shared_dim,
            max_seq_len: self.data.text_len + 2 * m.num_prompts,
            input: ptat::encoder::InputKind::Tokens { vocab_size: self.data.vocab_size },
        };
        ModelConfig {
            audio,
            text,
            num_prompts: m.num_prompts,
            inject_layer: self.ablation.inject_layer,
            lora_rank: m.lora_rank,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.data.vocab_size
    }

    /// Hash of everything that makes runs comparable: all sections except
    /// the strategy list, seeds and output location.
    pub fn comparable_hash(&self) -> String {
        let key = (&self.train, &self.data, &self.model, &self.ablation, &self.pretrain);
        let json = serde_json::to_vec(&key).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model_config(), ModelConfig::default());
    }

    #[test]
    fn serialised_config_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.run.strategies = vec![StrategyTag::Ptat, StrategyTag::LowRank];
        cfg.run.seeds = vec![3, 4];
        cfg.ablation.order = vec![3, 2, 1, 0];
        cfg.train.learning_rate = 1.5e-3;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_tags_are_rejected() {
        assert!(matches!(RunConfig::parse("[train]\nlr = 1.0\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::parse("[run]\nstrategies = [\"l2p\"]\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn field_level_messages_are_collected() {
        let text = "[train]\nlearning_rate = -1.0\nbatch_size = 1\n[ablation]\norder = [0, 0, 1, 2]\n";
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("train:"), "{err}");
        assert!(err.contains("ablation.order"), "{err}");
    }

    #[test]
    fn third_layer_injection_needs_three_audio_layers() {
        let err = RunConfig::parse("[ablation]\ninject_layer = 3\n").unwrap_err().to_string();
        assert!(err.contains("inject_layer"), "{err}");
        RunConfig::parse("[ablation]\ninject_layer = 3\n[model]\naudio_layers = 3\n").unwrap();
        assert!(RunConfig::parse("[ablation]\ninject_layer = 4\n[model]\naudio_layers = 4\n").is_err());
    }

    #[test]
    fn comparable_hash_ignores_strategies_and_seeds() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run.strategies = vec![StrategyTag::UpperBound];
        b.run.seeds = vec![9];
        assert_eq!(a.comparable_hash(), b.comparable_hash());
        b.train.epochs = 3;
        assert_ne!(a.comparable_hash(), b.comparable_hash());
    }
}
