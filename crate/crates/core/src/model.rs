//! Full model state: both encoders plus strategy-owned parameters, and the
//! batched forward pass for every strategy structure.

use std::collections::BTreeSet;

use diffmath::{Graph, Matrix, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atpg::generate_text_prompts;
use crate::baselines::{strategy_for, vpt_name, Strategy, StrategyTag, Structure, IVL_POST, IVL_PRE};
use crate::encoder::{self, AudioPrompts, EncoderConfig, EncoderState, TextPrompts};
use crate::error::{Error, Result};
use crate::losses::BatchEmbeddings;
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub audio: EncoderConfig,
    pub text: EncoderConfig,
    /// Audio prompt count; text prefix and postfix get the same count.
    pub num_prompts: usize,
    /// 1-based audio layer receiving the coupled prompts.
    pub inject_layer: usize,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio: EncoderConfig::desk_audio(),
            text: EncoderConfig::desk_text(),
            num_prompts: 12,
            inject_layer: 1,
            lora_rank: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        self.text.validate()?;
        if !matches!(self.audio.input, encoder::InputKind::Patches { .. })
            || !matches!(self.text.input, encoder::InputKind::Tokens { .. })
        {
            return Err(Error::Config("audio encoder needs patch input and text encoder token input".into()));
        }
        if self.audio.embed_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "audio and text embed_dim differ ({} vs {}); coupled prompts need one width",
                self.audio.embed_dim, self.text.embed_dim
            )));
        }
        if self.audio.shared_dim != self.text.shared_dim {
            return Err(Error::Config("audio and text shared_dim differ".into()));
        }
        if self.num_prompts == 0 {
            return Err(Error::Config("num_prompts must be at least 1".into()));
        }
        if self.inject_layer == 0 || self.inject_layer > self.audio.num_layers {
            return Err(Error::Config(format!(
                "inject_layer {} outside 1..={}",
                self.inject_layer, self.audio.num_layers
            )));
        }
        if self.audio.num_patches() + self.num_prompts > self.audio.max_seq_len {
            return Err(Error::Config(format!(
                "audio max_seq_len {} cannot hold {} patches and {} prompts",
                self.audio.max_seq_len,
                self.audio.num_patches(),
                self.num_prompts
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.audio.embed_dim {
            return Err(Error::Config(format!("lora_rank must be in 1..={}", self.audio.embed_dim)));
        }
        Ok(())
    }

    /// Longest caption that still fits next to both text prompt blocks.
    pub fn max_text_len(&self) -> usize {
        self.text.max_seq_len.saturating_sub(2 * self.num_prompts)
    }
}

/// SHA-256 identifying a model layout and strategy.
pub fn config_hash(cfg: &ModelConfig, tag: StrategyTag) -> [u8; 32] {
    let json = serde_json::to_vec(&(cfg, tag)).expect("config serialises");
    Sha256::digest(&json).into()
}

/// Backbone parameters (`audio.` and `text.` prefixes) for `cfg`.
pub fn init_backbone(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let audio = EncoderState::init(cfg.audio, rng)?;
    let text = EncoderState::init(cfg.text, rng)?;
    let mut store = ParamStore::new();
    store.extend_prefixed("audio.", &audio.params);
    store.extend_prefixed("text.", &text.params);
    Ok(store)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub tag: StrategyTag,
    pub params: ParamStore,
    /// Number of completed incremental steps.
    pub step: usize,
}

impl ModelState {
    /// Fresh backbone plus strategy parameters.
    pub fn init(config: ModelConfig, tag: StrategyTag, rng: &mut impl Rng) -> Result<Self> {
        let backbone = init_backbone(&config, rng)?;
        Self::from_backbone(config, tag, &backbone, rng)
    }

    /// Strategy parameters on top of an existing backbone.
    pub fn from_backbone(config: ModelConfig, tag: StrategyTag, backbone: &ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (k, v) in backbone.iter().filter(|(k, _)| k.starts_with("audio.") || k.starts_with("text.")) {
            params.insert(k, v.clone());
        }
        strategy_for(tag).init_params(&config, &mut params, rng)?;
        Ok(Self { config, tag, params, step: 0 })
    }

    pub fn strategy(&self) -> Strategy {
        strategy_for(self.tag)
    }

    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.config, self.tag)
    }

    /// Embeddings of many pairs with every parameter detached, in chunks.
    pub fn embed_all(&self, audio: &[&Matrix], text: &[&[usize]]) -> Result<(Matrix, Matrix)> {
        if audio.len() != text.len() {
            return Err(Error::Config("audio and text counts differ".into()));
        }
        let structure = self.strategy().structure;
        let mut a_rows = Vec::with_capacity(audio.len());
        let mut t_rows = Vec::with_capacity(text.len());
        for (ac, tc) in audio.chunks(64).zip(text.chunks(64)) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, &BTreeSet::new());
            let e = embed(&mut g, &self.config, structure, &p, ac, tc)?;
            a_rows.push(g.value(e.audio).clone());
            t_rows.push(g.value(e.text).clone());
        }
        let stack = |v: &[Matrix]| Matrix::stack_rows(&v.iter().collect::<Vec<_>>());
        Ok((stack(&a_rows)?, stack(&t_rows)?))
    }
}

/// Pooled audio features for a strategy structure.
pub fn audio_pooled(g: &mut Graph, cfg: &ModelConfig, structure: Structure, p: &Bound, specs: &[&Matrix]) -> Result<Var> {
    let audio = p.scope("audio.");
    let prompts = match structure {
        Structure::Coupled => AudioPrompts::AtLayer { layer: cfg.inject_layer, prompts: p.get(crate::atpg::PROMPTS)? },
        Structure::AudioShallow => AudioPrompts::AtLayer { layer: 1, prompts: p.get(&vpt_name(1))? },
        Structure::AudioDeep => {
            AudioPrompts::Deep((1..=cfg.audio.num_layers).map(|l| p.get(&vpt_name(l))).collect::<Result<_>>()?)
        }
        Structure::Plain | Structure::TextOnly | Structure::LowRank => AudioPrompts::None,
    };
    let low_rank = (structure == Structure::LowRank).then(|| p.scope("lora."));
    encoder::encode_audio_pooled(g, &audio, &cfg.audio, specs, &prompts, low_rank.as_ref())
}

/// Pooled text features for a strategy structure.
pub fn text_pooled(g: &mut Graph, cfg: &ModelConfig, structure: Structure, p: &Bound, tokens: &[&[usize]]) -> Result<Var> {
    let text = p.scope("text.");
    let prompts = match structure {
        Structure::Coupled => {
            let (_, pre, post) = generate_text_prompts(g, p)?;
            TextPrompts { prefix: Some(pre), postfix: Some(post) }
        }
        Structure::TextOnly => TextPrompts { prefix: Some(p.get(IVL_PRE)?), postfix: Some(p.get(IVL_POST)?) },
        _ => TextPrompts::default(),
    };
    encoder::encode_text_pooled(g, &text, &cfg.text, tokens, prompts)
}

/// Whether a modality's pooled features are independent of every trainable
/// parameter, so they can be computed once per dataset.
pub fn pooled_is_frozen(strategy: &Strategy, audio: bool) -> bool {
    if strategy.full_finetune {
        return false;
    }
    match (strategy.structure, audio) {
        (Structure::Plain, _) => true,
        (Structure::TextOnly, true) => true,
        (Structure::AudioShallow | Structure::AudioDeep | Structure::LowRank, false) => true,
        _ => false,
    }
}

/// Projects and normalises pooled features of both modalities.
pub fn project_pair(g: &mut Graph, p: &Bound, audio_pooled: Var, text_pooled: Var) -> Result<BatchEmbeddings> {
    Ok(BatchEmbeddings {
        audio: encoder::project(g, &p.scope("audio."), audio_pooled)?,
        text: encoder::project(g, &p.scope("text."), text_pooled)?,
    })
}

/// Unit-norm embeddings of a batch of pairs.
pub fn embed(
    g: &mut Graph,
    cfg: &ModelConfig,
    structure: Structure,
    p: &Bound,
    specs: &[&Matrix],
    tokens: &[&[usize]],
) -> Result<BatchEmbeddings> {
    let a = audio_pooled(g, cfg, structure, p, specs)?;
    let t = text_pooled(g, cfg, structure, p, tokens)?;
    project_pair(g, p, a, t)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::normal_matrix;

    #[test]
    fn default_config_is_valid_and_hash_depends_on_strategy() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.max_text_len(), 10);
        assert_ne!(config_hash(&cfg, StrategyTag::Ptat), config_hash(&cfg, StrategyTag::LowRank));
        let mut other = cfg;
        other.num_prompts = 11;
        assert_ne!(config_hash(&cfg, StrategyTag::Ptat), config_hash(&other, StrategyTag::Ptat));
    }

    #[test]
    fn inject_layer_bounds() {
        let mut cfg = ModelConfig::default();
        cfg.inject_layer = 3;
        assert!(cfg.validate().is_err());
        cfg.audio.num_layers = 3;
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_up_adapter_matches_unadapted_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = ModelConfig::default();
        let backbone = init_backbone(&cfg, &mut rng).unwrap();
        let plain = ModelState::from_backbone(cfg, StrategyTag::FinetuneSequential, &backbone, &mut rng).unwrap();
        let lora = ModelState::from_backbone(cfg, StrategyTag::LowRank, &backbone, &mut rng).unwrap();
        let specs: Vec<Matrix> = (0..3).map(|_| normal_matrix(&mut rng, 32, 16, 1.0)).collect();
        let refs: Vec<&Matrix> = specs.iter().collect();
        let toks: Vec<Vec<usize>> = (0..3).map(|i| vec![i; 10]).collect();
        let trefs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
        let (a1, t1) = plain.embed_all(&refs, &trefs).unwrap();
        let (a2, t2) = lora.embed_all(&refs, &trefs).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(t1, t2);
    }
}
