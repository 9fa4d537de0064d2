//! `selftest`: quick randomized property suites over the library, each
//! reporting pass or the first counterexample.

use std::collections::{BTreeSet, HashSet};

use diffmath::{Graph, Matrix};
use ptat::baselines::StrategyTag;
use ptat::continual::{run_step, TrainConfig};
use ptat::data::{generate_domain, SequenceConfig};
use ptat::eval::recall_at_k;
use ptat::gradcheck::tiny_config;
use ptat::losses::{
    contrastive_loss, feature_distillation_loss, kl_alignment_loss, similarity_distillation_loss, similarity_matrices,
    BatchEmbeddings,
};
use ptat::model::ModelState;
use ptat::snapshot::ModelSnapshot;
use ptat::SnapshotError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub outcome: Result<(), String>,
}

type Outcome = Result<(), String>;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let m = random(rng, rows, cols, 1.0);
    Matrix::from_fn(rows, cols, |r, c| {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.get(r, c) / n
    })
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn softmax_rows_are_distributions(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..8), rng.random_range(1..12));
        let mut g = Graph::new();
        let x = g.constant(random(rng, r, c, 20.0));
        let s = g.row_softmax(x).map_err(|e| e.to_string())?;
        for row in 0..r {
            let v = g.value(s).row(row);
            ensure((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9, || format!("row sum {}", v.iter().sum::<f64>()))?;
            ensure(v.iter().all(|&p| p > 0.0), || "non-positive probability".into())?;
        }
    }
    Ok(())
}

fn normalised_rows_have_unit_norm(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..100 {
        let mut g = Graph::new();
        let x = g.constant(random(rng, 5, 7, 3.0));
        let n = g.l2_normalize_rows(x).map_err(|e| e.to_string())?;
        for r in 0..5 {
            let norm = g.value(n).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure((norm - 1.0).abs() <= 1e-9, || format!("norm {norm}"))?;
        }
    }
    Ok(())
}

fn brute_recall(c: &Matrix, k: usize) -> f64 {
    let n = c.rows();
    let hits = (0..n)
        .filter(|&i| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| c.get(i, b).partial_cmp(&c.get(i, a)).unwrap().then(a.cmp(&b)));
            idx[..k].contains(&i)
        })
        .count();
    hits as f64 / n as f64
}

fn recall_matches_sorting(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..100 {
        let c = random(rng, 50, 50, 1.0);
        for k in [1, 5, 10] {
            let (got, want) = (recall_at_k(&c, k).map_err(|e| e.to_string())?, brute_recall(&c, k));
            ensure(got == want, || format!("k={k}: {got} vs {want}"))?;
        }
    }
    Ok(())
}

fn kl_losses_are_non_negative(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..100 {
        let mut g = Graph::new();
        let b = BatchEmbeddings { audio: g.constant(unit_rows(rng, 4, 6)), text: g.constant(unit_rows(rng, 4, 6)) };
        let kl = kl_alignment_loss(&mut g, b).map_err(|e| e.to_string())?;
        ensure(g.scalar(kl) >= 0.0, || format!("kl {}", g.scalar(kl)))?;
        let same = BatchEmbeddings { audio: b.audio, text: b.audio };
        let z = kl_alignment_loss(&mut g, same).map_err(|e| e.to_string())?;
        ensure(g.scalar(z).abs() <= 1e-9, || format!("kl of identical rows {}", g.scalar(z)))?;
    }
    Ok(())
}

fn contrastive_is_shift_invariant(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..50 {
        let mut g = Graph::new();
        let b = BatchEmbeddings { audio: g.constant(unit_rows(rng, 5, 4)), text: g.constant(unit_rows(rng, 5, 4)) };
        let pair = similarity_matrices(&mut g, b, 0.07).map_err(|e| e.to_string())?;
        let base = contrastive_loss(&mut g, pair).map_err(|e| e.to_string())?;
        let shift = g.constant(Matrix::filled(5, 5, rng.random_range(-3.0..3.0)));
        let a2t = g.add(pair.a2t, shift).map_err(|e| e.to_string())?;
        let t2a = g.add(pair.t2a, shift).map_err(|e| e.to_string())?;
        let shifted = contrastive_loss(&mut g, ptat::losses::SimilarityPair { a2t, t2a }).map_err(|e| e.to_string())?;
        let (x, y) = (g.scalar(base), g.scalar(shifted));
        ensure((x - y).abs() <= 1e-9, || format!("{x} vs {y}"))?;
    }
    Ok(())
}

fn distillation_vanishes_at_teacher(rng: &mut ChaCha8Rng) -> Outcome {
    let state = ModelState::init(tiny_config(), StrategyTag::Ptat, rng).map_err(|e| e.to_string())?;
    let specs: Vec<Matrix> = (0..4).map(|_| random(rng, 8, 8, 1.0)).collect();
    let toks: Vec<Vec<usize>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(0..16)).collect()).collect();
    let refs: Vec<&Matrix> = specs.iter().collect();
    let trefs: Vec<&[usize]> = toks.iter().map(Vec::as_slice).collect();
    let snap = ModelSnapshot::new(&state.params, state.config_hash(), 1);
    let student = ModelState { params: snap.params().clone(), ..state.clone() };
    let (sa, st) = student.embed_all(&refs, &trefs).map_err(|e| e.to_string())?;
    let (ta, tt) = student.embed_all(&refs, &trefs).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let s = BatchEmbeddings { audio: g.param(sa), text: g.param(st) };
    let t = BatchEmbeddings { audio: g.constant(ta), text: g.constant(tt) };
    let fd = feature_distillation_loss(&mut g, s, Some(t)).map_err(|e| e.to_string())?;
    let sp = similarity_matrices(&mut g, s, 0.07).map_err(|e| e.to_string())?;
    let tp = similarity_matrices(&mut g, t, 0.07).map_err(|e| e.to_string())?;
    let sd = similarity_distillation_loss(&mut g, sp, Some(tp)).map_err(|e| e.to_string())?;
    ensure(g.scalar(fd).abs() <= 1e-12 && g.scalar(sd).abs() <= 1e-12, || {
        format!("L_FD {} L_SD {}", g.scalar(fd), g.scalar(sd))
    })
}

fn snapshots_round_trip_and_reject_corruption(rng: &mut ChaCha8Rng) -> Outcome {
    let state = ModelState::init(tiny_config(), StrategyTag::LowRank, rng).map_err(|e| e.to_string())?;
    let snap = ModelSnapshot::new(&state.params, state.config_hash(), 2);
    let bytes = snap.to_bytes();
    let back = ModelSnapshot::from_bytes(&bytes, Some(&state.config_hash())).map_err(|e| e.to_string())?;
    ensure(back == snap, || "round trip changed the snapshot".into())?;
    for _ in 0..20 {
        let mut bad = bytes.clone();
        let i = rng.random_range(12..bytes.len());
        bad[i] ^= 1 << rng.random_range(0..8);
        let err = ModelSnapshot::from_bytes(&bad, None);
        ensure(matches!(err, Err(SnapshotError::Checksum { .. })), || format!("flip at byte {i} gave {err:?}"))?;
    }
    Ok(())
}

fn pairs_regenerate_and_splits_are_disjoint(_: &mut ChaCha8Rng) -> Outcome {
    let seq = SequenceConfig { num_domains: 2, num_train: 30, num_test: 10, ..Default::default() };
    for spec in seq.build(64).map_err(|e| e.to_string())?.domains {
        let data = generate_domain(&spec).map_err(|e| e.to_string())?;
        let train: HashSet<u64> = data.train.samples.iter().map(|p| p.id).collect();
        ensure(data.test.samples.iter().all(|p| !train.contains(&p.id)), || "train and test share an id".into())?;
        for p in data.train.samples.iter().chain(&data.test.samples) {
            let (a, t) = spec.regenerate(p.id).map_err(|e| e.to_string())?;
            ensure(a == p.audio && t == p.text, || format!("id {} does not regenerate", p.id))?;
        }
    }
    Ok(())
}

fn frozen_parameters_stay_bit_identical(rng: &mut ChaCha8Rng) -> Outcome {
    let data = {
        let seq = SequenceConfig { num_domains: 1, num_train: 8, num_test: 4, text_len: 4, ..Default::default() };
        let mut spec = seq.build(16).map_err(|e| e.to_string())?.domains.remove(0);
        // tiny model geometry: 8x8 spectrograms
        spec.spec_rows = 8;
        spec.spec_cols = 8;
        spec.audio_map = random(rng, 64, spec.latent_dim, 0.5);
        generate_domain(&spec).map_err(|e| e.to_string())?.train
    };
    for tag in [StrategyTag::Ptat, StrategyTag::PromptDeep, StrategyTag::LowRank] {
        let state = ModelState::init(tiny_config(), tag, rng).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 1e-2, ..Default::default() };
        let out = run_step(&state, &data, None, &cfg).map_err(|e| e.to_string())?;
        let trainable: BTreeSet<String> = state.strategy().partition(&state.params).names().clone();
        for (name, before) in state.params.iter() {
            let after = out.state.params.get(name).map_err(|e| e.to_string())?;
            if !trainable.contains(name) {
                ensure(before == after, || format!("{tag}: frozen `{name}` changed"))?;
            }
        }
    }
    Ok(())
}

/// Runs every suite with a fixed seed.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let suites: [(&'static str, fn(&mut ChaCha8Rng) -> Outcome); 9] = [
        ("softmax rows are distributions", softmax_rows_are_distributions),
        ("l2-normalised rows have unit norm", normalised_rows_have_unit_norm),
        ("recall@k matches a sorting oracle", recall_matches_sorting),
        ("KL losses are non-negative and vanish on equal inputs", kl_losses_are_non_negative),
        ("contrastive loss is shift invariant", contrastive_is_shift_invariant),
        ("distillation vanishes at the teacher", distillation_vanishes_at_teacher),
        ("snapshots round-trip and reject corruption", snapshots_round_trip_and_reject_corruption),
        ("pairs regenerate and splits are disjoint", pairs_regenerate_and_splits_are_disjoint),
        ("frozen parameters stay bit-identical", frozen_parameters_stay_bit_identical),
    ];
    suites
        .iter()
        .enumerate()
        .map(|(i, (name, f))| Check { name, outcome: f(&mut ChaCha8Rng::seed_from_u64(seed ^ (i as u64) << 8)) })
        .collect()
}
