//! Comparison strategies. Each one is a trainable partition over the shared
//! encoders plus the structural parameters it adds (prompts, adapters).

use std::fmt;
use std::str::FromStr;

use diffmath::Matrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atpg::{PromptSet, TrainablePartition};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::losses::DistillToggles;
use crate::model::ModelConfig;
use crate::params::{normal_matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    Ptat,
    FinetuneSequential,
    FinetuneJoint,
    PromptShallow,
    PromptDeep,
    TextPromptOnly,
    LowRank,
    UpperBound,
}

impl StrategyTag {
    pub const ALL: [StrategyTag; 8] = [
        StrategyTag::Ptat,
        StrategyTag::FinetuneSequential,
        StrategyTag::FinetuneJoint,
        StrategyTag::PromptShallow,
        StrategyTag::PromptDeep,
        StrategyTag::TextPromptOnly,
        StrategyTag::LowRank,
        StrategyTag::UpperBound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyTag::Ptat => "ptat",
            StrategyTag::FinetuneSequential => "finetune_sequential",
            StrategyTag::FinetuneJoint => "finetune_joint",
            StrategyTag::PromptShallow => "prompt_shallow",
            StrategyTag::PromptDeep => "prompt_deep",
            StrategyTag::TextPromptOnly => "text_prompt_only",
            StrategyTag::LowRank => "low_rank",
            StrategyTag::UpperBound => "upper_bound",
        }
    }
}

impl fmt::Display for StrategyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyTag::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| Error::UnknownStrategy {
            tag: s.to_string(),
            valid: StrategyTag::ALL.map(StrategyTag::as_str).join(", "),
        })
    }
}

/// How prompts or adapters enter the encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    /// Audio prompts at one layer; text prompts derived from them.
    Coupled,
    /// No structural edits.
    Plain,
    /// Independent audio prompts before the first block.
    AudioShallow,
    /// Independent audio prompts at every block.
    AudioDeep,
    /// Independent text prefix/postfix prompts only.
    TextOnly,
    /// Low-rank updates to audio query/value projections.
    LowRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub tag: StrategyTag,
    pub structure: Structure,
    /// Whether the previous snapshot serves as a distillation teacher.
    pub distill: DistillToggles,
    /// Whether every backbone parameter trains.
    pub full_finetune: bool,
}

pub fn build_strategy(tag: &str) -> Result<Strategy> {
    Ok(strategy_for(tag.parse()?))
}

pub fn strategy_for(tag: StrategyTag) -> Strategy {
    let (structure, distill, full_finetune) = match tag {
        StrategyTag::Ptat => (Structure::Coupled, DistillToggles::ALL, false),
        StrategyTag::FinetuneSequential | StrategyTag::FinetuneJoint | StrategyTag::UpperBound => {
            (Structure::Plain, DistillToggles::NONE, true)
        }
        StrategyTag::PromptShallow => (Structure::AudioShallow, DistillToggles::NONE, false),
        StrategyTag::PromptDeep => (Structure::AudioDeep, DistillToggles::NONE, false),
        StrategyTag::TextPromptOnly => (Structure::TextOnly, DistillToggles::NONE, false),
        StrategyTag::LowRank => (Structure::LowRank, DistillToggles::NONE, false),
    };
    Strategy { tag, structure, distill, full_finetune }
}

pub const PROJECTIONS: [&str; 4] = ["audio.proj.weight", "audio.proj.bias", "text.proj.weight", "text.proj.bias"];

pub fn vpt_name(layer: usize) -> String {
    format!("vpt.layer{layer}")
}

pub const IVL_PRE: &str = "ivl.t_pre";
pub const IVL_POST: &str = "ivl.t_post";

impl Strategy {
    /// Adds the strategy's own parameters to a store holding the backbone.
    pub fn init_params(&self, cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let d = cfg.audio.embed_dim;
        let n = cfg.num_prompts;
        match self.structure {
            Structure::Plain => {}
            Structure::Coupled => PromptSet::init(n, d, cfg.inject_layer, rng)?.write_params(store),
            Structure::AudioShallow => store.insert(vpt_name(1), normal_matrix(rng, n, d, 0.02)),
            Structure::AudioDeep => {
                for l in 1..=cfg.audio.num_layers {
                    store.insert(vpt_name(l), normal_matrix(rng, n, d, 0.02));
                }
            }
            Structure::TextOnly => {
                let dt = cfg.text.embed_dim;
                store.insert(IVL_PRE, normal_matrix(rng, n, dt, 0.02));
                store.insert(IVL_POST, normal_matrix(rng, n, dt, 0.02));
            }
            Structure::LowRank => {
                let audio = EncoderState { config: cfg.audio, params: store.scoped("audio.") };
                let adapters = apply_low_rank(&audio, cfg.lora_rank, rng)?;
                store.extend_prefixed("lora.", &adapters);
            }
        }
        Ok(())
    }

    /// Names that train under this strategy.
    pub fn partition(&self, store: &ParamStore) -> TrainablePartition {
        let names = store.names().filter(|n| self.is_trainable(n)).map(str::to_string);
        TrainablePartition::new(names)
    }

    fn is_trainable(&self, name: &str) -> bool {
        if self.full_finetune {
            return name.starts_with("audio.") || name.starts_with("text.");
        }
        if PROJECTIONS.contains(&name) {
            return true;
        }
        match self.structure {
            Structure::Plain => false,
            Structure::Coupled => name.starts_with("atpg."),
            Structure::AudioShallow => name == vpt_name(1),
            Structure::AudioDeep => name.starts_with("vpt."),
            Structure::TextOnly => name.starts_with("ivl."),
            Structure::LowRank => name.starts_with("lora."),
        }
    }
}

/// Low-rank adapters for the query and value projections of every audio
/// attention layer, named `layer{i}.q.down` etc. `up` starts at zero so the
/// adapted encoder initially computes exactly what the base encoder does.
pub fn apply_low_rank(encoder: &EncoderState, rank: usize, rng: &mut impl Rng) -> Result<ParamStore> {
    let d = encoder.config.embed_dim;
    if rank == 0 || rank > d {
        return Err(Error::Config(format!("low-rank rank must be in 1..={d}, got {rank}")));
    }
    let mut out = ParamStore::new();
    for l in 0..encoder.config.num_layers {
        for m in ["q", "v"] {
            encoder.params.get(&format!("layer{l}.attn.w{m}"))?;
            out.insert(format!("layer{l}.{m}.down"), normal_matrix(rng, d, rank, 1.0 / (d as f64).sqrt()));
            out.insert(format!("layer{l}.{m}.up"), Matrix::zeros(rank, d));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::atpg::count_trainable;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelState;

    fn model(tag: StrategyTag) -> ModelState {
        ModelState::init(ModelConfig::default(), tag, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn unknown_tag_lists_valid_ones() {
        let err = build_strategy("replay").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("replay") && msg.contains("finetune_joint") && msg.contains("low_rank"), "{msg}");
    }

    #[test]
    fn tags_round_trip() {
        for t in StrategyTag::ALL {
            assert_eq!(build_strategy(t.as_str()).unwrap().tag, t);
        }
    }

    #[test]
    fn prompt_shallow_trains_prompts_and_projections() {
        let m = model(StrategyTag::PromptShallow);
        let part = m.strategy().partition(&m.params);
        let mut expected: Vec<String> = PROJECTIONS.iter().map(|s| s.to_string()).collect();
        expected.push("vpt.layer1".into());
        expected.sort();
        assert_eq!(part.names().iter().cloned().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn finetune_trains_everything() {
        let m = model(StrategyTag::FinetuneSequential);
        let s = m.strategy();
        let part = s.partition(&m.params);
        assert_eq!(part.names().len(), m.params.len());
        assert_eq!(s.distill, DistillToggles::NONE);
        assert_eq!(count_trainable(&part, &m.params).unwrap(), 157_088);
    }

    #[test]
    fn low_rank_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = EncoderState::init(EncoderConfig::desk_audio(), &mut rng).unwrap();
        let adapters = apply_low_rank(&enc, 4, &mut rng).unwrap();
        assert_eq!(adapters.num_values(), 2 * 2 * (2 * 4 * 32));
        assert_eq!(adapters.get("layer0.q.down").unwrap().len() + adapters.get("layer0.q.up").unwrap().len(), 256);
        assert!(apply_low_rank(&enc, 33, &mut rng).is_err());
        assert!(apply_low_rank(&enc, 0, &mut rng).is_err());
    }

    #[test]
    fn deep_partition_contains_shallow() {
        let deep = model(StrategyTag::PromptDeep);
        let shallow = model(StrategyTag::PromptShallow);
        let dp = deep.strategy().partition(&deep.params);
        let sp = shallow.strategy().partition(&shallow.params);
        assert!(sp.names().is_subset(dp.names()));
        assert!(dp.names().len() > sp.names().len());
    }

    #[test]
    fn closed_form_counts_per_strategy() {
        let (n, d, proj) = (12, 32, 2 * (32 * 32 + 32));
        let cases = [
            (StrategyTag::Ptat, n * d + 2 * (d * d + d) + proj),
            (StrategyTag::PromptShallow, n * d + proj),
            (StrategyTag::PromptDeep, 2 * n * d + proj),
            (StrategyTag::TextPromptOnly, 2 * n * d + proj),
            (StrategyTag::LowRank, 2 * 2 * (2 * 4 * d) + proj),
            (StrategyTag::UpperBound, 157_088),
        ];
        for (tag, expected) in cases {
            let m = model(tag);
            let part = m.strategy().partition(&m.params);
            assert_eq!(count_trainable(&part, &m.params).unwrap(), expected, "{tag}");
        }
    }
}
