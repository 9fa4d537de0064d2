//! The incremental protocol: train on one domain per step, distil from the
//! previous step's snapshot, evaluate on every domain seen so far.

use std::collections::BTreeSet;

use diffmath::{DiffError, Graph, Matrix, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atpg::count_trainable;
use crate::baselines::{strategy_for, StrategyTag, Structure};
use crate::data::{mix, DomainData, DomainSpec, PairedDataset, SequenceConfig};
use crate::encoder::{self, AudioPrompts, TextPrompts};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, MetricsHistory, RetrievalScores};
use crate::losses::{total_loss, BatchEmbeddings, DistillToggles, LossValues, LossWeights};
use crate::model::{self, pooled_is_frozen, ModelConfig, ModelState};
use crate::optim::AdamW;
use crate::params::{Bound, ParamStore};
use crate::snapshot::ModelSnapshot;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Loss-term switches applied on top of the strategy's own distillation.
    pub distill: DistillToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
            weights: LossWeights::default(),
            seed: 0,
            distill: DistillToggles::ALL,
        }
    }
}

impl Default for DistillToggles {
    fn default() -> Self {
        DistillToggles::ALL
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        self.weights.validate()
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Components of every batch, in order.
    pub batch_losses: Vec<LossValues>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: ModelState,
    pub snapshot: ModelSnapshot,
    pub report: StepReport,
}

/// Pooled features of a whole dataset for a modality whose pooled output
/// cannot change during the step.
fn frozen_pooled(state: &ModelState, structure: Structure, data: &PairedDataset, audio: bool) -> Result<Matrix> {
    let specs = data.spectrograms();
    let tokens = data.token_slices();
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(64) {
        let end = (start + 64).min(data.len());
        let mut g = Graph::new();
        let p = state.params.bind(&mut g, &BTreeSet::new());
        let v = if audio {
            model::audio_pooled(&mut g, &state.config, structure, &p, &specs[start..end])?
        } else {
            model::text_pooled(&mut g, &state.config, structure, &p, &tokens[start..end])?
        };
        parts.push(g.value(v).clone());
    }
    Ok(Matrix::stack_rows(&parts.iter().collect::<Vec<_>>())?)
}

fn gather(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.cols(), |i, j| m.get(idx[i], j))
}

fn diverged(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::NonFiniteLoss { .. } | Error::LossComponent { .. } | Error::Math(DiffError::NonFinite { .. }) => {
            Error::Diverged { epoch, batch, reason: e.to_string() }
        }
        other => other,
    }
}

/// Trains the strategy's partition on one domain. `teacher` is the previous
/// step's snapshot and is only consulted when a distillation term is active.
pub fn run_step(
    state: &ModelState,
    dataset: &PairedDataset,
    teacher: Option<&ModelSnapshot>,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    cfg.validate()?;
    let strategy = state.strategy();
    let toggles = DistillToggles {
        feature: strategy.distill.feature && cfg.distill.feature,
        similarity: strategy.distill.similarity && cfg.distill.similarity,
    };
    let distilling = toggles.feature || toggles.similarity;
    if let Some(t) = teacher {
        if t.config_hash != state.config_hash() {
            return Err(Error::TeacherMismatch);
        }
    }
    let teacher_emb = match teacher.filter(|_| distilling) {
        Some(t) => {
            let tm = ModelState { params: t.params().clone(), ..state.clone() };
            Some(tm.embed_all(&dataset.spectrograms(), &dataset.token_slices())?)
        }
        None => None,
    };
    let structure = strategy.structure;
    let audio_cache = if pooled_is_frozen(&strategy, true) && cfg.epochs > 0 {
        Some(frozen_pooled(state, structure, dataset, true)?)
    } else {
        None
    };
    let text_cache = if pooled_is_frozen(&strategy, false) && cfg.epochs > 0 {
        Some(frozen_pooled(state, structure, dataset, false)?)
    } else {
        None
    };

    let partition = strategy.partition(&state.params);
    let mut params = state.params.clone();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut report = StepReport::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, state.step as u64), epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let p = params.bind(&mut g, partition.names());
            let a = match &audio_cache {
                Some(c) => g.constant(gather(c, idx)),
                None => {
                    let specs: Vec<&Matrix> = idx.iter().map(|&i| &dataset.samples[i].audio.spectrogram).collect();
                    model::audio_pooled(&mut g, &state.config, structure, &p, &specs)?
                }
            };
            let t = match &text_cache {
                Some(c) => g.constant(gather(c, idx)),
                None => {
                    let toks: Vec<&[usize]> = idx.iter().map(|&i| dataset.samples[i].text.tokens.as_slice()).collect();
                    model::text_pooled(&mut g, &state.config, structure, &p, &toks)?
                }
            };
            let emb = model::project_pair(&mut g, &p, a, t).map_err(diverged(epoch, batch))?;
            let teacher_batch = teacher_emb.as_ref().map(|(ta, tt)| BatchEmbeddings {
                audio: g.constant(gather(ta, idx)),
                text: g.constant(gather(tt, idx)),
            });
            let terms = total_loss(&mut g, emb, teacher_batch, cfg.weights, toggles).map_err(diverged(epoch, batch))?;
            let values = terms.values(&g);
            if !values.total.is_finite() {
                return Err(Error::Diverged { epoch, batch, reason: "total loss is not finite".into() });
            }
            let grads = g.backward(terms.total).map_err(|e| diverged(epoch, batch)(e.into()))?;
            let named: Vec<(&str, &Matrix)> = partition
                .names()
                .iter()
                .filter_map(|n| p.get(n).ok().and_then(|v| grads.get(v)).map(|m| (n.as_str(), m)))
                .collect();
            opt.step(&mut params, named).map_err(diverged(epoch, batch))?;
            sum += values.total;
            count += 1;
            report.batch_losses.push(values);
        }
        report.epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    for name in partition.names() {
        let rounded = params.get(name)?.round_to_f32();
        params.insert(name, rounded);
    }
    let new_state = ModelState { params, step: state.step + 1, ..state.clone() };
    let snapshot = ModelSnapshot::new(&new_state.params, new_state.config_hash(), new_state.step);
    Ok(StepOutcome { state: new_state, snapshot, report })
}

/// Rebuilds a model state from a snapshot of the same layout.
pub fn state_from_snapshot(template: &ModelState, snapshot: &ModelSnapshot) -> Result<ModelState> {
    if snapshot.config_hash != template.config_hash() {
        return Err(Error::TeacherMismatch);
    }
    Ok(ModelState { params: snapshot.params().clone(), step: snapshot.step, ..template.clone() })
}

/// Snapshot persistence used by [`run_sequence`] to resume.
pub trait Checkpoints {
    fn load(&mut self, key: usize) -> Result<Option<ModelSnapshot>>;
    fn save(&mut self, key: usize, snapshot: &ModelSnapshot) -> Result<()>;
}

/// No persistence.
pub struct NoCheckpoints;

impl Checkpoints for NoCheckpoints {
    fn load(&mut self, _: usize) -> Result<Option<ModelSnapshot>> {
        Ok(None)
    }

    fn save(&mut self, _: usize, _: &ModelSnapshot) -> Result<()> {
        Ok(())
    }
}

/// Everything a sequence run produces.
#[derive(Debug, Clone)]
pub struct SequenceResult {
    pub history: MetricsHistory,
    pub final_state: ModelState,
    /// Step reports of steps actually trained (resumed steps are absent).
    pub reports: Vec<(usize, StepReport)>,
    pub trained_steps: usize,
}

/// Runs one strategy over the domains in order.
pub fn run_sequence(
    domains: &[DomainData],
    backbone: &ParamStore,
    model_cfg: &ModelConfig,
    tag: StrategyTag,
    cfg: &TrainConfig,
    checkpoints: &mut dyn Checkpoints,
) -> Result<SequenceResult> {
    if domains.is_empty() {
        return Err(Error::Config("a sequence needs at least one domain".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1));
    let initial = ModelState::from_backbone(*model_cfg, tag, &backbone.round_to_f32(), &mut rng)?;
    let strategy = strategy_for(tag);
    let trainable = count_trainable(&strategy.partition(&initial.params), &initial.params)?;
    let full = count_trainable(&strategy_for(StrategyTag::FinetuneSequential).partition(&initial.params), &initial.params)?;
    let mut history = MetricsHistory::new(tag.as_str(), cfg.seed, trainable, full);
    let mut reports = Vec::new();
    let mut trained_steps = 0;

    let mut train_or_resume = |key: usize, state: &ModelState, data: &PairedDataset, teacher: Option<&ModelSnapshot>| -> Result<(ModelState, ModelSnapshot)> {
        if let Some(s) = checkpoints.load(key)? {
            let st = state_from_snapshot(state, &s)?;
            return Ok((st, s));
        }
        let out = run_step(state, data, teacher, cfg)?;
        checkpoints.save(key, &out.snapshot)?;
        reports.push((key, out.report));
        trained_steps += 1;
        Ok((out.state, out.snapshot))
    };

    let final_state = match tag {
        StrategyTag::FinetuneJoint => {
            let trains: Vec<&PairedDataset> = domains.iter().map(|d| &d.train).collect();
            let union = PairedDataset::union("joint", &trains);
            let (state, _) = train_or_resume(1, &initial, &union, None)?;
            let scores: Vec<RetrievalScores> =
                domains.iter().map(|d| evaluate_retrieval(&state, &d.test)).collect::<Result<_>>()?;
            for m in 1..=domains.len() {
                for (d, s) in domains[..m].iter().zip(&scores) {
                    history.insert_scores(m, &d.test.domain, s)?;
                }
            }
            state
        }
        StrategyTag::UpperBound => {
            let mut scores = Vec::new();
            let mut last = initial.clone();
            for (m, d) in domains.iter().enumerate() {
                let (state, _) = train_or_resume(m + 1, &initial, &d.train, None)?;
                scores.push(evaluate_retrieval(&state, &d.test)?);
                for (dj, s) in domains[..=m].iter().zip(&scores) {
                    history.insert_scores(m + 1, &dj.test.domain, s)?;
                }
                last = state;
            }
            last
        }
        _ => {
            let mut state = initial.clone();
            let mut teacher: Option<ModelSnapshot> = None;
            let distill = strategy.distill.feature || strategy.distill.similarity;
            for (m, d) in domains.iter().enumerate() {
                let t = teacher.as_ref().filter(|_| distill);
                let (next, snap) = train_or_resume(m + 1, &state, &d.train, t)?;
                for dj in &domains[..=m] {
                    history.insert_scores(m + 1, &dj.test.domain, &evaluate_retrieval(&next, &dj.test)?)?;
                }
                state = next;
                teacher = Some(snap);
            }
            state
        }
    };
    Ok(SequenceResult { history, final_state, reports, trained_steps })
}

/// Full-parameter warm-up of a fresh backbone on a held-out domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub num_train: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fixed across runs so every run seed shares one backbone.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { num_train: 2000, epochs: 20, learning_rate: 1e-3, batch_size: 32, seed: 0 }
    }
}

/// Zero-valued prompt rows in every prompt slot, so the positions prompts
/// occupy later are trained as well.
fn slot_embeddings(g: &mut Graph, cfg: &ModelConfig, p: &Bound, specs: &[&Matrix], toks: &[&[usize]], slots: bool) -> Result<BatchEmbeddings> {
    if !slots {
        return model::embed(g, cfg, Structure::Plain, p, specs, toks);
    }
    let n = cfg.num_prompts;
    let za = g.constant(Matrix::zeros(n, cfg.audio.embed_dim));
    let zt = g.constant(Matrix::zeros(n, cfg.text.embed_dim));
    let a = encoder::encode_audio_pooled(g, &p.scope("audio."), &cfg.audio, specs, &AudioPrompts::AtLayer { layer: 1, prompts: za }, None)?;
    let t = encoder::encode_text_pooled(g, &p.scope("text."), &cfg.text, toks, TextPrompts { prefix: Some(zt), postfix: Some(zt) })?;
    model::project_pair(g, p, a, t)
}

/// Pretrains a backbone on the held-out domain, drawing `num_train` fresh
/// pairs every epoch; batches alternate between plain inputs and inputs with
/// zero-valued prompt slots.
pub fn pretrain_backbone(model_cfg: &ModelConfig, seq: &SequenceConfig, pre: &PretrainConfig) -> Result<ParamStore> {
    let seed = pre.seed;
    let vocab = match model_cfg.text.input {
        encoder::InputKind::Tokens { vocab_size } => vocab_size,
        _ => return Err(Error::Config("text encoder needs token input".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    let mut params = model::init_backbone(model_cfg, &mut rng)?;
    if pre.epochs == 0 {
        return Ok(params.round_to_f32());
    }
    let domain = seq.pretrain_domain(vocab, pre.num_train)?;
    let names: BTreeSet<String> = params.names().map(str::to_string).collect();
    let mut opt = AdamW::new(pre.learning_rate, 1e-4);
    let weights = LossWeights::default();
    for epoch in 0..pre.epochs {
        let span = (domain.num_train + domain.num_test) as u64;
        let fresh = DomainSpec { id_base: domain.id_base + epoch as u64 * span, ..domain.clone() };
        let data = crate::data::generate_domain(&fresh)?.train;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(mix(seed, 3), epoch as u64)));
        for (batch, idx) in order.chunks(pre.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let specs: Vec<&Matrix> = idx.iter().map(|&i| &data.samples[i].audio.spectrogram).collect();
            let toks: Vec<&[usize]> = idx.iter().map(|&i| data.samples[i].text.tokens.as_slice()).collect();
            let mut g = Graph::new();
            let p = params.bind(&mut g, &names);
            let emb = slot_embeddings(&mut g, model_cfg, &p, &specs, &toks, batch % 2 == 1).map_err(diverged(epoch, batch))?;
            let terms = total_loss(&mut g, emb, None, weights, DistillToggles::NONE).map_err(diverged(epoch, batch))?;
            let grads = g.backward(terms.total)?;
            let named: Vec<(&str, &Matrix)> = names
                .iter()
                .filter_map(|n| p.get(n).ok().and_then(|v: Var| grads.get(v)).map(|m| (n.as_str(), m)))
                .collect();
            opt.step(&mut params, named).map_err(diverged(epoch, batch))?;
        }
    }
    Ok(params.round_to_f32())
}
