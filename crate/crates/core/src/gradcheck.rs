//! Finite-difference verification of every training objective.
//!
//! A tiny model (width 8) is built for each strategy partition; each loss
//! component and the weighted total are rebuilt from the partition's
//! trainable leaves and compared entry by entry against central differences.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use diffmath::{finite_difference_report, DiffError, Graph, Matrix, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::StrategyTag;
use crate::encoder::{EncoderConfig, InputKind};
use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, feature_distillation_loss, kl_alignment_loss, similarity_distillation_loss, similarity_matrices,
    total_loss, BatchEmbeddings, DistillToggles, LossWeights,
};
use crate::model::{embed, ModelConfig, ModelState};
use crate::params::{normal_matrix, Bound, ParamStore};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;
pub const GRADCHECK_BATCH: usize = 4;

/// Partitions covered by the check.
pub const GRADCHECK_STRATEGIES: [StrategyTag; 5] = [
    StrategyTag::Ptat,
    StrategyTag::PromptShallow,
    StrategyTag::PromptDeep,
    StrategyTag::TextPromptOnly,
    StrategyTag::LowRank,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Contrastive,
    KlAlignment,
    FeatureDistillation,
    SimilarityDistillation,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Contrastive,
        Objective::KlAlignment,
        Objective::FeatureDistillation,
        Objective::SimilarityDistillation,
        Objective::Total,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Contrastive => "contrastive",
            Objective::KlAlignment => "kl_alignment",
            Objective::FeatureDistillation => "feature_distillation",
            Objective::SimilarityDistillation => "similarity_distillation",
            Objective::Total => "total",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub strategy: StrategyTag,
    pub objective: Objective,
    pub max_relative_error: f64,
    pub entries: usize,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

/// Width-8 model with two prompts injected at audio layer 2.
pub fn tiny_config() -> ModelConfig {
    let audio = EncoderConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_hidden: 16,
        max_seq_len: 6,
        shared_dim: 8,
        input: InputKind::Patches { spec_rows: 8, spec_cols: 8, patch_rows: 4, patch_cols: 4 },
    };
    let text = EncoderConfig { max_seq_len: 8, input: InputKind::Tokens { vocab_size: 16 }, ..audio };
    ModelConfig { audio, text, num_prompts: 2, inject_layer: 2, lora_rank: 2 }
}

fn to_diff(e: Error) -> DiffError {
    match e {
        Error::Math(d) => d,
        other => DiffError::InvalidArgument { op: "gradcheck", reason: other.to_string() },
    }
}

fn objective_loss(g: &mut Graph, objective: Objective, student: BatchEmbeddings, teacher: BatchEmbeddings) -> Result<Var> {
    let w = LossWeights::default();
    match objective {
        Objective::Contrastive => {
            let pair = similarity_matrices(g, student, w.tau)?;
            contrastive_loss(g, pair)
        }
        Objective::KlAlignment => kl_alignment_loss(g, student),
        Objective::FeatureDistillation => feature_distillation_loss(g, student, Some(teacher)),
        Objective::SimilarityDistillation => {
            let s = similarity_matrices(g, student, w.tau)?;
            let t = similarity_matrices(g, teacher, w.tau)?;
            similarity_distillation_loss(g, s, Some(t))
        }
        Objective::Total => Ok(total_loss(g, student, Some(teacher), w, DistillToggles::ALL)?.total),
    }
}

fn perturbed(store: &ParamStore, names: &BTreeSet<String>, std: f64, rng: &mut impl Rng) -> ParamStore {
    let mut out = store.clone();
    for n in names {
        let m = out.get_mut(n).expect("partition names come from the store");
        let noise = normal_matrix(rng, m.rows(), m.cols(), std);
        m.add_assign(&noise);
    }
    out
}

/// Checks every objective for one strategy partition.
pub fn check_strategy(tag: StrategyTag, seed: u64) -> Result<Vec<GradcheckCase>> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = ModelState::init(cfg, tag, &mut rng)?;
    let strategy = state.strategy();
    let trainable: BTreeSet<String> = strategy.partition(&state.params).names().clone();
    // move strategy parameters off their identity/zero initialisation
    let student = perturbed(&state.params, &trainable, 0.3, &mut rng);
    let teacher_params = perturbed(&student, &trainable, 0.2, &mut rng);

    let specs: Vec<Matrix> = (0..GRADCHECK_BATCH).map(|_| normal_matrix(&mut rng, 8, 8, 1.0)).collect();
    let tokens: Vec<Vec<usize>> = (0..GRADCHECK_BATCH).map(|_| (0..4).map(|_| rng.random_range(0..16)).collect()).collect();
    let spec_refs: Vec<&Matrix> = specs.iter().collect();
    let tok_refs: Vec<&[usize]> = tokens.iter().map(Vec::as_slice).collect();
    let teacher = ModelState { params: teacher_params, ..state.clone() }.embed_all(&spec_refs, &tok_refs)?;

    let names: Vec<String> = trainable.iter().cloned().collect();
    let values: Vec<Matrix> = names.iter().map(|n| student.get(n).cloned()).collect::<Result<_>>()?;
    let frozen: Vec<(String, Matrix)> =
        student.iter().filter(|(n, _)| !trainable.contains(*n)).map(|(n, m)| (n.to_string(), m.clone())).collect();

    let mut cases = Vec::new();
    for objective in Objective::ALL {
        let builder = |g: &mut Graph, leaves: &[Var]| -> std::result::Result<Var, DiffError> {
            let mut vars: HashMap<String, Var> = names.iter().cloned().zip(leaves.iter().copied()).collect();
            for (n, m) in &frozen {
                vars.insert(n.clone(), g.constant(m.clone()));
            }
            let p = Bound::from_vars(vars);
            let emb = embed(g, &cfg, strategy.structure, &p, &spec_refs, &tok_refs).map_err(to_diff)?;
            let t = BatchEmbeddings { audio: g.constant(teacher.0.clone()), text: g.constant(teacher.1.clone()) };
            objective_loss(g, objective, emb, t).map_err(to_diff)
        };
        let report = finite_difference_report(&builder, &values, GRADCHECK_EPSILON)?;
        cases.push(GradcheckCase {
            strategy: tag,
            objective,
            max_relative_error: report.max_relative_error,
            entries: report.entries_checked,
        });
    }
    Ok(cases)
}

/// Every objective for every partition in [`GRADCHECK_STRATEGIES`].
pub fn run_gradcheck(seed: u64) -> Result<Vec<GradcheckCase>> {
    let mut out = Vec::new();
    for tag in GRADCHECK_STRATEGIES {
        out.extend(check_strategy(tag, seed)?);
    }
    Ok(out)
}
