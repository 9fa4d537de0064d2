//! Toy dual encoders: a patch-sequence audio transformer and a token-sequence
//! text transformer, both pre-norm, mean-pooled and projected into a shared
//! unit-norm embedding space.
//!
//! Forward passes work on whole batches. Samples are stacked row-wise into a
//! single `(sum of sequence lengths) x d` matrix so every linear layer is one
//! matmul; attention is computed per sample on row slices.

use std::collections::BTreeSet;

use diffmath::{Graph, Matrix, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::atpg::PromptInjector;
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Bound, ParamStore};

/// Input stage of an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Spectrogram cut into non-overlapping `patch_rows x patch_cols` patches.
    Patches { spec_rows: usize, spec_cols: usize, patch_rows: usize, patch_cols: usize },
    /// Token ids looked up in an embedding table.
    Tokens { vocab_size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub shared_dim: usize,
    pub input: InputKind,
}

impl EncoderConfig {
    pub fn desk_audio() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden: 512,
            max_seq_len: 44,
            shared_dim: 32,
            input: InputKind::Patches { spec_rows: 32, spec_cols: 16, patch_rows: 4, patch_cols: 4 },
        }
    }

    pub fn desk_text() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden: 512,
            max_seq_len: 34,
            shared_dim: 32,
            input: InputKind::Tokens { vocab_size: 64 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 || self.shared_dim == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by num_heads {}", self.embed_dim, self.num_heads));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        match self.input {
            InputKind::Patches { spec_rows, spec_cols, patch_rows, patch_cols } => {
                if patch_rows == 0 || patch_cols == 0 || spec_rows % patch_rows != 0 || spec_cols % patch_cols != 0 {
                    return bad(format!(
                        "{patch_rows}x{patch_cols} patches do not tile a {spec_rows}x{spec_cols} spectrogram"
                    ));
                }
                if self.num_patches() > self.max_seq_len {
                    return bad(format!("{} patches exceed max_seq_len {}", self.num_patches(), self.max_seq_len));
                }
            }
            InputKind::Tokens { vocab_size } => {
                if vocab_size == 0 {
                    return bad("vocab_size must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        match self.input {
            InputKind::Patches { spec_rows, spec_cols, patch_rows, patch_cols } => {
                (spec_rows / patch_rows) * (spec_cols / patch_cols)
            }
            InputKind::Tokens { .. } => 0,
        }
    }

    /// Rows of the positional table. Audio prompts carry no position, so the
    /// audio table covers patches only; text prompts consume leading positions.
    pub fn num_positions(&self) -> usize {
        match self.input {
            InputKind::Patches { .. } => self.num_patches(),
            InputKind::Tokens { .. } => self.max_seq_len,
        }
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Named encoder weights. Which of them are frozen is decided by the active
/// strategy's trainable partition, not stored here.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl EncoderState {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamStore::new();
        match config.input {
            InputKind::Patches { patch_rows, patch_cols, .. } => {
                let pd = patch_rows * patch_cols;
                p.insert("patch.weight", normal_matrix(rng, pd, d, inv(pd)));
                p.insert("patch.bias", Matrix::zeros(1, d));
            }
            InputKind::Tokens { vocab_size } => {
                p.insert("token_embedding", normal_matrix(rng, vocab_size, d, 1.0));
            }
        }
        p.insert("pos", normal_matrix(rng, config.num_positions(), d, 0.1));
        for l in 0..config.num_layers {
            p.insert(format!("layer{l}.ln1.gamma"), Matrix::filled(1, d, 1.0));
            p.insert(format!("layer{l}.ln1.beta"), Matrix::zeros(1, d));
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("layer{l}.attn.{w}"), normal_matrix(rng, d, d, inv(d)));
            }
            p.insert(format!("layer{l}.ln2.gamma"), Matrix::filled(1, d, 1.0));
            p.insert(format!("layer{l}.ln2.beta"), Matrix::zeros(1, d));
            p.insert(format!("layer{l}.mlp.w1"), normal_matrix(rng, d, h, inv(d)));
            p.insert(format!("layer{l}.mlp.b1"), Matrix::zeros(1, h));
            p.insert(format!("layer{l}.mlp.w2"), normal_matrix(rng, h, d, inv(h)));
            p.insert(format!("layer{l}.mlp.b2"), Matrix::zeros(1, d));
        }
        p.insert("final_ln.gamma", Matrix::filled(1, d, 1.0));
        p.insert("final_ln.beta", Matrix::zeros(1, d));
        p.insert("proj.weight", normal_matrix(rng, d, config.shared_dim, inv(d)));
        p.insert("proj.bias", Matrix::zeros(1, config.shared_dim));
        Ok(Self { config, params: p })
    }
}

/// Synthetic stand-in for a mel spectrogram (time x frequency).
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSample {
    pub spectrogram: Matrix,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSample {
    pub tokens: Vec<usize>,
}

/// Where audio prompts enter the audio encoder.
#[derive(Debug, Clone)]
pub enum AudioPrompts {
    None,
    /// One prompt block prepended before block `layer` (1-based).
    AtLayer { layer: usize, prompts: Var },
    /// One block per layer: prepended before block 1, then each later block
    /// replaces the previous block's prompt rows.
    Deep(Vec<Var>),
}

/// Text prompt rows prepended and appended around the token embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct TextPrompts {
    pub prefix: Option<Var>,
    pub postfix: Option<Var>,
}

fn offsets(lens: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(lens.len());
    let mut acc = 0;
    for &l in lens {
        out.push(acc);
        acc += l;
    }
    out
}

fn check_lens(lens: &[usize], max: usize) -> Result<()> {
    match lens.iter().copied().max() {
        Some(len) if len > max => Err(Error::SequenceOverflow { len, max }),
        _ => Ok(()),
    }
}

fn layer_norm_affine(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.layer_norm_rows(x)?;
    let s = g.mul(n, gamma)?;
    Ok(g.add(s, beta)?)
}

/// `W + down·up` when a low-rank adapter exists for `name`, else `W`.
fn adapted_weight(g: &mut Graph, w: Var, low_rank: Option<&Bound>, name: &str) -> Result<Var> {
    match low_rank {
        Some(lr) if lr.has(&format!("{name}.down")) => {
            let down = lr.get(&format!("{name}.down"))?;
            let up = lr.get(&format!("{name}.up"))?;
            let delta = g.matmul(down, up)?;
            Ok(g.add(w, delta)?)
        }
        _ => Ok(w),
    }
}

fn attention(
    g: &mut Graph,
    p: &Bound,
    layer: usize,
    h: Var,
    lens: &[usize],
    cfg: &EncoderConfig,
    low_rank: Option<&Bound>,
) -> Result<Var> {
    let wq = p.get(&format!("layer{layer}.attn.wq"))?;
    let wq = adapted_weight(g, wq, low_rank, &format!("layer{layer}.q"))?;
    let wk = p.get(&format!("layer{layer}.attn.wk"))?;
    let wv = p.get(&format!("layer{layer}.attn.wv"))?;
    let wv = adapted_weight(g, wv, low_rank, &format!("layer{layer}.v"))?;
    let wo = p.get(&format!("layer{layer}.attn.wo"))?;
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let offs = offsets(lens);
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let (qh, kh, vh) = if cfg.num_heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, head * dh, dh)?, g.slice_cols(k, head * dh, dh)?, g.slice_cols(v, head * dh, dh)?)
        };
        let mut outs = Vec::with_capacity(lens.len());
        for (&o, &len) in offs.iter().zip(lens) {
            let qs = g.slice_rows(qh, o, len)?;
            let ks = g.slice_rows(kh, o, len)?;
            let vs = g.slice_rows(vh, o, len)?;
            let kt = g.transpose(ks)?;
            let scores = g.matmul(qs, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.row_softmax(scores)?;
            outs.push(g.matmul(weights, vs)?);
        }
        heads.push(g.concat_rows(&outs)?);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    Ok(g.matmul(joined, wo)?)
}

fn block(
    g: &mut Graph,
    p: &Bound,
    layer: usize,
    x: Var,
    lens: &[usize],
    cfg: &EncoderConfig,
    low_rank: Option<&Bound>,
) -> Result<Var> {
    let ln = |n: &str| p.get(&format!("layer{layer}.{n}"));
    let h = layer_norm_affine(g, x, ln("ln1.gamma")?, ln("ln1.beta")?)?;
    let a = attention(g, p, layer, h, lens, cfg, low_rank)?;
    let x = g.add(x, a)?;
    let h = layer_norm_affine(g, x, ln("ln2.gamma")?, ln("ln2.beta")?)?;
    let h = g.matmul(h, ln("mlp.w1")?)?;
    let h = g.add(h, ln("mlp.b1")?)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, ln("mlp.w2")?)?;
    let h = g.add(h, ln("mlp.b2")?)?;
    Ok(g.add(x, h)?)
}

/// Final layer norm followed by a per-sample mean over all rows, prompt rows
/// included.
fn pool(g: &mut Graph, p: &Bound, x: Var, lens: &[usize]) -> Result<Var> {
    let x = layer_norm_affine(g, x, p.get("final_ln.gamma")?, p.get("final_ln.beta")?)?;
    let total: usize = lens.iter().sum();
    let mut pool = Matrix::zeros(lens.len(), total);
    for (b, (&o, &len)) in offsets(lens).iter().zip(lens).enumerate() {
        for r in o..o + len {
            pool.set(b, r, 1.0 / len as f64);
        }
    }
    let pool = g.constant(pool);
    Ok(g.matmul(pool, x)?)
}

/// Tiles positional rows `0..len` for each sample.
fn tiled_positions(g: &mut Graph, pos: Var, lens: &[usize]) -> Result<Var> {
    let mut parts = Vec::with_capacity(lens.len());
    let mut cache: Vec<(usize, Var)> = Vec::new();
    for &len in lens {
        let v = match cache.iter().find(|(l, _)| *l == len) {
            Some((_, v)) => *v,
            None => {
                let v = g.slice_rows(pos, 0, len)?;
                cache.push((len, v));
                v
            }
        };
        parts.push(v);
    }
    Ok(g.concat_rows(&parts)?)
}

/// Flattens each spectrogram into row-major patches, one row per patch.
fn patch_rows_matrix(cfg: &EncoderConfig, specs: &[&Matrix]) -> Result<Matrix> {
    let InputKind::Patches { spec_rows, spec_cols, patch_rows, patch_cols } = cfg.input else {
        return Err(Error::Config("audio encoder requires a patch input".into()));
    };
    let per = cfg.num_patches();
    let pd = patch_rows * patch_cols;
    let mut data = Vec::with_capacity(specs.len() * per * pd);
    for s in specs {
        if s.shape() != (spec_rows, spec_cols) {
            return Err(Error::Config(format!(
                "spectrogram is {}x{}, encoder expects {spec_rows}x{spec_cols}",
                s.rows(),
                s.cols()
            )));
        }
        for pr in 0..spec_rows / patch_rows {
            for pc in 0..spec_cols / patch_cols {
                for r in 0..patch_rows {
                    let row = s.row(pr * patch_rows + r);
                    data.extend_from_slice(&row[pc * patch_cols..(pc + 1) * patch_cols]);
                }
            }
        }
    }
    Ok(Matrix::new(specs.len() * per, pd, data)?)
}

/// Pooled audio features, `batch x embed_dim`, before the projection head.
pub fn encode_audio_pooled(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderConfig,
    specs: &[&Matrix],
    prompts: &AudioPrompts,
    low_rank: Option<&Bound>,
) -> Result<Var> {
    let patches = g.constant(patch_rows_matrix(cfg, specs)?);
    let x = g.matmul(patches, p.get("patch.weight")?)?;
    let x = g.add(x, p.get("patch.bias")?)?;
    let mut lens = vec![cfg.num_patches(); specs.len()];
    let pos = tiled_positions(g, p.get("pos")?, &lens)?;
    let mut x = g.add(x, pos)?;

    let mut injector = match prompts {
        AudioPrompts::AtLayer { layer, .. } => {
            if *layer == 0 || *layer > cfg.num_layers {
                return Err(Error::Config(format!(
                    "inject_layer {layer} outside 1..={}",
                    cfg.num_layers
                )));
            }
            Some(PromptInjector::new(*layer))
        }
        _ => None,
    };
    if let AudioPrompts::Deep(per_layer) = prompts {
        if per_layer.len() != cfg.num_layers {
            return Err(Error::Config(format!(
                "deep prompts need {} blocks, got {}",
                cfg.num_layers,
                per_layer.len()
            )));
        }
    }
    for layer in 0..cfg.num_layers {
        match prompts {
            AudioPrompts::AtLayer { layer: at, prompts } if *at == layer + 1 => {
                let inj = injector.as_mut().expect("created above");
                (x, lens) = inj.inject(g, layer + 1, x, &lens, *prompts)?;
            }
            AudioPrompts::Deep(per_layer) => {
                (x, lens) = if layer == 0 {
                    crate::atpg::prepend_rows(g, x, &lens, per_layer[0])?
                } else {
                    crate::atpg::replace_leading_rows(g, x, &lens, per_layer[layer])?
                };
            }
            _ => {}
        }
        check_lens(&lens, cfg.max_seq_len)?;
        x = block(g, p, layer, x, &lens, cfg, low_rank)?;
    }
    pool(g, p, x, &lens)
}

/// Pooled text features, `batch x embed_dim`, before the projection head.
pub fn encode_text_pooled(
    g: &mut Graph,
    p: &Bound,
    cfg: &EncoderConfig,
    tokens: &[&[usize]],
    prompts: TextPrompts,
) -> Result<Var> {
    let InputKind::Tokens { vocab_size } = cfg.input else {
        return Err(Error::Config("text encoder requires a token input".into()));
    };
    let total: usize = tokens.iter().map(|t| t.len()).sum();
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(Error::Config("empty token sequence".into()));
    }
    let mut onehot = Matrix::zeros(total, vocab_size);
    let mut r = 0;
    for seq in tokens {
        for &t in seq.iter() {
            if t >= vocab_size {
                return Err(Error::Config(format!("token {t} outside vocabulary of {vocab_size}")));
            }
            onehot.set(r, t, 1.0);
            r += 1;
        }
    }
    let onehot = g.constant(onehot);
    let emb = g.matmul(onehot, p.get("token_embedding")?)?;

    let n_pre = prompts.prefix.map_or(0, |v| g.value(v).rows());
    let n_post = prompts.postfix.map_or(0, |v| g.value(v).rows());
    for v in [prompts.prefix, prompts.postfix].into_iter().flatten() {
        if g.value(v).cols() != cfg.embed_dim {
            return Err(Error::Config(format!(
                "text prompt width {} does not match embed_dim {}",
                g.value(v).cols(),
                cfg.embed_dim
            )));
        }
    }
    let lens: Vec<usize> = tokens.iter().map(|t| n_pre + t.len() + n_post).collect();
    check_lens(&lens, cfg.max_seq_len)?;
    let mut parts = Vec::with_capacity(tokens.len() * 3);
    let mut o = 0;
    for seq in tokens {
        if let Some(pre) = prompts.prefix.filter(|_| n_pre > 0) {
            parts.push(pre);
        }
        parts.push(g.slice_rows(emb, o, seq.len())?);
        if let Some(post) = prompts.postfix.filter(|_| n_post > 0) {
            parts.push(post);
        }
        o += seq.len();
    }
    let x = g.concat_rows(&parts)?;
    let pos = tiled_positions(g, p.get("pos")?, &lens)?;
    let mut x = g.add(x, pos)?;
    for layer in 0..cfg.num_layers {
        x = block(g, p, layer, x, &lens, cfg, None)?;
    }
    pool(g, p, x, &lens)
}

/// Projection head followed by row-wise L2 normalisation.
pub fn project(g: &mut Graph, p: &Bound, pooled: Var) -> Result<Var> {
    let z = g.matmul(pooled, p.get("proj.weight")?)?;
    let z = g.add(z, p.get("proj.bias")?)?;
    Ok(g.l2_normalize_rows(z)?)
}

fn frozen_bind(g: &mut Graph, state: &EncoderState) -> Bound {
    state.params.bind(g, &BTreeSet::new())
}

/// Embeds one audio clip with optional prompts injected before `inject_layer`.
pub fn encode_audio(
    sample: &AudioSample,
    audio_prompts: Option<&Matrix>,
    inject_layer: usize,
    state: &EncoderState,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = frozen_bind(&mut g, state);
    let prompts = match audio_prompts {
        Some(a) => {
            if a.cols() != state.config.embed_dim {
                return Err(Error::Config(format!(
                    "audio prompt width {} does not match embed_dim {}",
                    a.cols(),
                    state.config.embed_dim
                )));
            }
            AudioPrompts::AtLayer { layer: inject_layer, prompts: g.constant(a.clone()) }
        }
        None => AudioPrompts::None,
    };
    let pooled = encode_audio_pooled(&mut g, &p, &state.config, &[&sample.spectrogram], &prompts, None)?;
    let e = project(&mut g, &p, pooled)?;
    Ok(g.value(e).row(0).to_vec())
}

/// Embeds one caption with optional prefix/postfix prompt rows.
pub fn encode_text(
    sample: &TextSample,
    t_pre: Option<&Matrix>,
    t_post: Option<&Matrix>,
    state: &EncoderState,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = frozen_bind(&mut g, state);
    let prompts = TextPrompts {
        prefix: t_pre.map(|m| g.constant(m.clone())),
        postfix: t_post.map(|m| g.constant(m.clone())),
    };
    let pooled = encode_text_pooled(&mut g, &p, &state.config, &[&sample.tokens], prompts)?;
    let e = project(&mut g, &p, pooled)?;
    Ok(g.value(e).row(0).to_vec())
}
