//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p ptat-cli --test acceptance` runs everything; pass criterion
//! numbers after `--` to run a subset.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use diffmath::{Graph, Matrix};
use ptat::baselines::{strategy_for, StrategyTag};
use ptat::continual::{run_step, state_from_snapshot, TrainConfig};
use ptat::data::{generate_domain, SequenceConfig};
use ptat::eval::{anti_forgetting_score, average_metrics, evaluate_retrieval, recall_at_k, Direction, MetricsHistory, KS};
use ptat::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use ptat::losses::{
    contrastive_directions, feature_distillation_loss, kl_alignment_loss, similarity_distillation_loss, similarity_matrices,
    BatchEmbeddings,
};
use ptat::model::{self, ModelConfig, ModelState};
use ptat::snapshot::{load_snapshot, ModelSnapshot};
use ptat::SnapshotError;
use ptat_cli::config::RunConfig;
use ptat_cli::run::{self, RunManifest, RunOptions, BACKBONE_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const ORACLE_TOLERANCE: f64 = 1e-9;
const TEACHER_TOLERANCE: f64 = 1e-12;
const TREND_BUDGET: Duration = Duration::from_secs(30 * 60);
const TREND_SEEDS_REQUIRED: usize = 4;
/// Half a recall point.
const ABLATION_TIE: f64 = 0.005;
const RATIO_LIMIT: f64 = 0.05;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = run_gradcheck(0).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    for c in &cases {
        check(c.passed(), || format!("{} / {}: rel err {:.3e}", c.strategy, c.objective, c.max_relative_error))?;
    }
    check(elapsed < GRADCHECK_BUDGET, || format!("took {elapsed:.1?}"))?;
    Ok(format!("{} cases, worst rel err {worst:.2e} (< {GRADCHECK_TOLERANCE:e}), {elapsed:.1?}", cases.len()))
}

fn sorted_recall(c: &Matrix, k: usize) -> f64 {
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

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn row_kl(x: &Matrix, y: &Matrix) -> f64 {
    (0..x.rows())
        .map(|r| {
            let (p, q) = (softmax(x.row(r)), softmax(y.row(r)));
            p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>()
        })
        .sum::<f64>()
        / x.rows() as f64
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    Matrix::from_fn(rows, cols, |r, c| m.get(r, c) / m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn sims(a: &Matrix, t: &Matrix, tau: f64) -> Matrix {
    Matrix::from_fn(a.rows(), t.rows(), |i, j| a.row(i).iter().zip(t.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..100 {
        let c = Matrix::from_fn(50, 50, |_, _| rng.random_range(-1.0..1.0));
        for k in KS {
            let (got, want) = (recall_at_k(&c, k).map_err(err)?, sorted_recall(&c, k));
            check(got == want, || format!("matrix {trial}, k={k}: {got} vs {want}"))?;
        }
    }
    let mut worst: f64 = 0.0;
    let tau = 0.07;
    for _ in 0..100 {
        let (sa, st, ta, tt) = (unit_rows(&mut rng, 4, 8), unit_rows(&mut rng, 4, 8), unit_rows(&mut rng, 4, 8), unit_rows(&mut rng, 4, 8));
        let mut g = Graph::new();
        let s = BatchEmbeddings { audio: g.constant(sa.clone()), text: g.constant(st.clone()) };
        let t = BatchEmbeddings { audio: g.constant(ta.clone()), text: g.constant(tt.clone()) };
        let sp = similarity_matrices(&mut g, s, tau).map_err(err)?;
        let tp = similarity_matrices(&mut g, t, tau).map_err(err)?;
        let (c, ct, tc, tct) = (sims(&sa, &st, tau), sims(&st, &sa, tau), sims(&ta, &tt, tau), sims(&tt, &ta, tau));
        let diag_ce = |m: &Matrix| -(0..m.rows()).map(|i| softmax(m.row(i))[i].ln()).sum::<f64>() / m.rows() as f64;

        let kl = kl_alignment_loss(&mut g, s).map_err(err)?;
        let fd = feature_distillation_loss(&mut g, s, Some(t)).map_err(err)?;
        let sd = similarity_distillation_loss(&mut g, sp, Some(tp)).map_err(err)?;
        let (t2a, a2t) = contrastive_directions(&mut g, sp).map_err(err)?;
        let softmax_var = g.row_softmax(sp.a2t).map_err(err)?;
        let pairs = [
            (g.scalar(kl), row_kl(&sa, &st) + row_kl(&st, &sa)),
            (g.scalar(fd), row_kl(&sa, &ta) + row_kl(&st, &tt)),
            (g.scalar(sd), row_kl(&ct, &tct) + row_kl(&c, &tc)),
            (g.scalar(t2a), diag_ce(&ct)),
            (g.scalar(a2t), diag_ce(&c)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
        for r in 0..4 {
            for (x, y) in g.value(softmax_var).row(r).iter().zip(softmax(c.row(r))) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    check(worst <= ORACLE_TOLERANCE, || format!("largest loss deviation {worst:.3e}"))?;
    Ok(format!("recall exact on 100 50x50 matrices; largest KL/softmax deviation {worst:.1e}"))
}

fn zero_at_teacher() -> Outcome {
    let cfg = ModelConfig::default();
    let state = ModelState::init(cfg, StrategyTag::Ptat, &mut ChaCha8Rng::seed_from_u64(3)).map_err(err)?;
    let teacher = ModelSnapshot::new(&state.params, state.config_hash(), 1);
    let student = state_from_snapshot(&state, &teacher).map_err(err)?;
    let seq = SequenceConfig { num_domains: 1, num_train: 4, num_test: 4, ..Default::default() };
    let data = generate_domain(&seq.build(64).map_err(err)?.domains[0]).map_err(err)?.train;
    let (specs, toks) = (data.spectrograms(), data.token_slices());
    let (ta, tt) = student.embed_all(&specs, &toks).map_err(err)?;

    let mut g = Graph::new();
    let p = student.params.bind(&mut g, student.strategy().partition(&student.params).names());
    let s = model::embed(&mut g, &cfg, student.strategy().structure, &p, &specs, &toks).map_err(err)?;
    let t = BatchEmbeddings { audio: g.constant(ta), text: g.constant(tt) };
    let fd = feature_distillation_loss(&mut g, s, Some(t)).map_err(err)?;
    let sp = similarity_matrices(&mut g, s, 0.07).map_err(err)?;
    let tp = similarity_matrices(&mut g, t, 0.07).map_err(err)?;
    let sd = similarity_distillation_loss(&mut g, sp, Some(tp)).map_err(err)?;
    let (fd, sd) = (g.scalar(fd), g.scalar(sd));
    check(fd.abs() <= TEACHER_TOLERANCE && sd.abs() <= TEACHER_TOLERANCE, || format!("L_FD {fd:e}, L_SD {sd:e}"))?;
    Ok(format!("desk model, 4 pairs: L_FD = {fd:e}, L_SD = {sd:e}"))
}

fn frozen_partitions() -> Outcome {
    let cfg = ModelConfig::default();
    let seq = SequenceConfig { num_domains: 1, num_train: 64, num_test: 4, ..Default::default() };
    let data = generate_domain(&seq.build(64).map_err(err)?.domains[0]).map_err(err)?.train;
    let train = TrainConfig { learning_rate: 3e-3, epochs: 1, batch_size: 16, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut summary = Vec::new();
    for tag in [StrategyTag::Ptat, StrategyTag::PromptShallow, StrategyTag::PromptDeep, StrategyTag::TextPromptOnly, StrategyTag::LowRank, StrategyTag::FinetuneSequential] {
        let state = ModelState::init(cfg, tag, &mut rng).map_err(err)?;
        let out = run_step(&state, &data, None, &train).map_err(err)?;
        let declared: BTreeSet<String> = strategy_for(tag).partition(&state.params).names().clone();
        let mut changed = BTreeSet::new();
        for (name, before) in state.params.iter() {
            let after = out.state.params.get(name).map_err(err)?;
            let identical = before.shape() == after.shape() && before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !identical {
                changed.insert(name.to_string());
            }
        }
        let frozen_moved: Vec<&String> = changed.difference(&declared).collect();
        check(frozen_moved.is_empty(), || format!("{tag}: frozen parameters changed: {frozen_moved:?}"))?;
        let stuck: Vec<&String> = declared.difference(&changed).collect();
        check(stuck.is_empty(), || format!("{tag}: trainable parameters did not move: {stuck:?}"))?;
        summary.push(format!("{tag} {}/{}", changed.len(), state.params.len()));
    }
    Ok(format!("changed tensors = declared partition: {}", summary.join(", ")))
}

/// Trend runs shared by criteria 5 to 8.
struct Trend {
    root: PathBuf,
    manifest: RunManifest,
    elapsed: Duration,
    ablations: Vec<(&'static str, RunManifest)>,
}

fn trend_config() -> (String, RunConfig) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/trend.toml");
    let text = fs::read_to_string(&path).expect("trend config");
    let cfg = RunConfig::parse(&text).expect("trend config parses");
    (text, cfg)
}

fn histories(root: &Path, manifest: &RunManifest, tag: StrategyTag) -> Result<Vec<MetricsHistory>, String> {
    manifest
        .runs
        .iter()
        .filter(|r| r.strategy == tag)
        .map(|r| MetricsHistory::from_jsonl(&fs::read_to_string(root.join(&r.metrics)).map_err(err)?).map_err(err))
        .collect()
}

fn run_trend(tmp: &Path) -> Result<Trend, String> {
    let (text, cfg) = trend_config();
    let root = tmp.join("trend");
    let start = Instant::now();
    let (manifest, _) = run::run_experiment(&root, &text, &cfg, &RunOptions::default(), |o| {
        eprintln!("  trend: {} seed {} done", o.entry.strategy, o.entry.seed);
    })
    .map_err(err)?;
    let elapsed = start.elapsed();
    let mut ablations = Vec::new();
    for (name, feature, similarity) in [("fd_only", true, false), ("sd_only", false, true), ("no_distill", false, false)] {
        let mut c = cfg.clone();
        c.run.strategies = vec![StrategyTag::Ptat];
        c.ablation.feature_distillation = feature;
        c.ablation.similarity_distillation = similarity;
        let dir = tmp.join(name);
        fs::create_dir_all(&dir).map_err(err)?;
        // same pretraining settings, so the shared backbone is reused
        fs::copy(root.join(BACKBONE_FILE), dir.join(BACKBONE_FILE)).map_err(err)?;
        let (m, _) = run::run_experiment(&dir, &c.to_toml(), &c, &RunOptions::default(), |o| {
            eprintln!("  {name}: seed {} done", o.entry.seed);
        })
        .map_err(err)?;
        ablations.push((name, m));
    }
    Ok(Trend { root: tmp.to_path_buf(), manifest, elapsed, ablations })
}

fn d1_final_r10(h: &MetricsHistory) -> f64 {
    let last = h.final_step().expect("non-empty");
    let d1 = &h.datasets()[0];
    Direction::BOTH.iter().map(|&d| h.get(last, d1, d, 10).expect("complete")).sum::<f64>() / 2.0
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn forgetting_trend(t: &Trend) -> Outcome {
    let dir = t.root.join("trend");
    let ptat = histories(&dir, &t.manifest, StrategyTag::Ptat)?;
    let mut lines = vec![format!("ptat d1 R@10 {:?}", ptat.iter().map(d1_final_r10).collect::<Vec<_>>())];
    let mut ok = true;
    for rival in [StrategyTag::FinetuneSequential, StrategyTag::PromptShallow] {
        let other = histories(&dir, &t.manifest, rival)?;
        let wins = ptat.iter().zip(&other).filter(|(p, o)| d1_final_r10(p) > d1_final_r10(o)).count();
        let (pm, om) = (mean(&ptat.iter().map(d1_final_r10).collect::<Vec<_>>()), mean(&other.iter().map(d1_final_r10).collect::<Vec<_>>()));
        lines.push(format!("vs {rival}: mean {pm:.4} vs {om:.4}, ptat ahead in {wins}/{} seeds", ptat.len()));
        ok &= pm > om && wins >= TREND_SEEDS_REQUIRED;
    }
    lines.push(format!("runtime {:.1} min", t.elapsed.as_secs_f64() / 60.0));
    ok &= t.elapsed < TREND_BUDGET;
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

fn afs_trend(t: &Trend) -> Outcome {
    let dir = t.root.join("trend");
    let afs = |tag, d| -> Result<f64, String> {
        let hs = histories(&dir, &t.manifest, tag)?;
        let v: Vec<f64> = hs.iter().map(|h| anti_forgetting_score(h, &h.datasets()[0], d).map(|e| e.afs)).collect::<Result<_, _>>().map_err(err)?;
        Ok(mean(&v))
    };
    let (p, f) = (afs(StrategyTag::Ptat, Direction::T2a)?, afs(StrategyTag::FinetuneSequential, Direction::T2a)?);
    let (pa, fa) = (afs(StrategyTag::Ptat, Direction::A2t)?, afs(StrategyTag::FinetuneSequential, Direction::A2t)?);
    let msg = format!("domain1 AFS t2a: ptat {p:.4} vs finetune {f:.4} (a2t: {pa:.4} vs {fa:.4})");
    if p > f {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn final_average(h: &MetricsHistory) -> f64 {
    let avg = average_metrics(h).expect("complete history");
    avg.values().sum::<f64>() / avg.len() as f64
}

fn ablation_order(t: &Trend) -> Outcome {
    let full = mean(&histories(&t.root.join("trend"), &t.manifest, StrategyTag::Ptat)?.iter().map(final_average).collect::<Vec<_>>());
    let mut m = std::collections::BTreeMap::new();
    for (name, manifest) in &t.ablations {
        m.insert(*name, mean(&histories(&t.root.join(name), manifest, StrategyTag::Ptat)?.iter().map(final_average).collect::<Vec<_>>()));
    }
    let (fd, sd, none) = (m["fd_only"], m["sd_only"], m["no_distill"]);
    let ge = |a: f64, b: f64| a + ABLATION_TIE >= b;
    let msg = format!("mean final average recall: full {full:.4}, sd_only {sd:.4}, fd_only {fd:.4}, none {none:.4}");
    if ge(full, sd) && ge(sd, none) && ge(full, fd) && ge(fd, none) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn parameter_ratio(t: &Trend) -> Outcome {
    let dir = t.root.join("trend");
    let entry = t.manifest.runs.iter().find(|r| r.strategy == StrategyTag::Ptat).ok_or("no ptat run")?;
    let h = &histories(&dir, &t.manifest, StrategyTag::Ptat)?[0];
    let ft = histories(&dir, &t.manifest, StrategyTag::FinetuneSequential)?;
    let ratio = h.trainable_params as f64 / ft[0].trainable_params as f64;
    check(h.full_params == ft[0].trainable_params, || "full_params differs from the finetune count".into())?;
    check(entry.trainable_ratio == ratio, || format!("manifest ratio {} vs {ratio}", entry.trainable_ratio))?;
    let record = fs::read_to_string(dir.join(&entry.metrics)).map_err(err)?;
    check(record.contains(&format!("\"trainable_params\":{}", h.trainable_params)), || "metrics lack trainable_params".into())?;
    check(ratio < RATIO_LIMIT, || format!("ratio {ratio}"))?;
    Ok(format!("{} / {} = {ratio:.6}", h.trainable_params, ft[0].trainable_params))
}

const SMALL_RUN: &str = r#"
[run]
strategies = ["ptat", "low_rank"]
seeds = [0]

[train]
learning_rate = 3e-3
epochs = 1

[data]
num_train = 160
num_test = 40

[pretrain]
num_train = 160
epochs = 1
"#;

fn determinism(tmp: &Path) -> Outcome {
    let cfg = RunConfig::parse(SMALL_RUN).map_err(err)?;
    let (a, b) = (tmp.join("det_a"), tmp.join("det_b"));
    let (ma, _) = run::run_experiment(&a, SMALL_RUN, &cfg, &RunOptions::default(), |_| {}).map_err(err)?;
    let (mb, _) = run::run_experiment(&b, SMALL_RUN, &cfg, &RunOptions::default(), |_| {}).map_err(err)?;
    check(ma == mb, || "manifests differ".into())?;
    let mut files = 0;
    for r in &ma.runs {
        for rel in [&r.metrics, &r.csv] {
            let (x, y) = (fs::read(a.join(rel)).map_err(err)?, fs::read(b.join(rel)).map_err(err)?);
            check(x == y, || format!("{} differs", rel.display()))?;
            files += 1;
        }
    }
    Ok(format!("{files} metrics files byte-identical across two runs"))
}

fn snapshot_integrity(tmp: &Path) -> Outcome {
    let dir = tmp.join("det_a");
    let cfg = RunConfig::parse(SMALL_RUN).map_err(err)?;
    let manifest = RunManifest::load(&dir).map_err(err)?;
    let domains = run::domains(&cfg, 0).map_err(err)?;
    let backbone = load_snapshot(&dir.join(BACKBONE_FILE), None).map_err(err)?;
    let mut compared = 0;
    for entry in &manifest.runs {
        let h = MetricsHistory::from_jsonl(&fs::read_to_string(dir.join(&entry.metrics)).map_err(err)?).map_err(err)?;
        let template = ModelState::from_backbone(cfg.model_config(), entry.strategy, backbone.params(), &mut ChaCha8Rng::seed_from_u64(0)).map_err(err)?;
        for step in 1..=domains.len() {
            let path = run::run_dir(&dir, entry.strategy, entry.seed).join(format!("snapshots/step{step}.snap"));
            let snap = load_snapshot(&path, Some(&template.config_hash())).map_err(err)?;
            let state = state_from_snapshot(&template, &snap).map_err(err)?;
            for d in &domains[..step] {
                let s = evaluate_retrieval(&state, &d.test).map_err(err)?;
                for dir in Direction::BOTH {
                    for (i, k) in KS.iter().enumerate() {
                        let recorded = h.get(step, &d.test.domain, dir, *k).ok_or("missing record")?;
                        check(s.get(dir)[i].to_bits() == recorded.to_bits(), || {
                            format!("{} step {step} {}: {} vs recorded {recorded}", entry.strategy, d.test.domain, s.get(dir)[i])
                        })?;
                        compared += 1;
                    }
                }
            }
        }
    }

    let bytes = fs::read(run::run_dir(&dir, StrategyTag::Ptat, 0).join("snapshots/step1.snap")).map_err(err)?;
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    let mut version = bytes.clone();
    version[8] = 9;
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    let cases: [(&str, Vec<u8>, Option<[u8; 32]>, fn(&SnapshotError) -> bool); 6] = [
        ("bad magic", magic, None, |e| matches!(e, SnapshotError::BadMagic)),
        ("unknown version", version, None, |e| matches!(e, SnapshotError::Version { .. })),
        ("flipped bit", flipped, None, |e| matches!(e, SnapshotError::Checksum { .. })),
        ("cut header", bytes[..20].to_vec(), None, |e| matches!(e, SnapshotError::Truncated(_))),
        ("cut payload", bytes[..bytes.len() - 100].to_vec(), None, |e| matches!(e, SnapshotError::Checksum { .. } | SnapshotError::Truncated(_))),
        ("wrong model", bytes.clone(), Some([0; 32]), |e| matches!(e, SnapshotError::ConfigHash)),
    ];
    for (name, data, hash, expected) in cases {
        match ModelSnapshot::from_bytes(&data, hash.as_ref()) {
            Err(e) if expected(&e) => {}
            other => return Err(format!("{name}: got {other:?}")),
        }
    }
    let missing = load_snapshot(&dir.join("nope.snap"), None);
    check(matches!(missing, Err(ptat::Error::Snapshot(SnapshotError::Io(_)))), || format!("missing file: {missing:?}"))?;
    Ok(format!("{compared} reloaded recalls bit-identical; 7 corruption cases rejected with their error class"))
}

fn main() {
    let selected: BTreeSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut failures = 0;
    let mut report = |n: u32, name: &str, outcome: std::thread::Result<Outcome>| {
        let outcome = outcome.unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}. {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {n:>2}. {name}: {detail}");
                failures += 1;
            }
        }
    };

    let quick: [(u32, &str, Box<dyn Fn() -> Outcome>); 6] = [
        (1, "gradient correctness", Box::new(gradients)),
        (2, "oracle equivalence", Box::new(oracles)),
        (3, "zero at teacher", Box::new(zero_at_teacher)),
        (4, "frozen-partition law", Box::new(frozen_partitions)),
        (9, "determinism", Box::new(|| determinism(tmp.path()))),
        (10, "snapshot integrity", Box::new(|| {
            if !tmp.path().join("det_a").exists() {
                determinism(tmp.path())?;
            }
            snapshot_integrity(tmp.path())
        })),
    ];
    let mut results = Vec::new();
    for (n, name, f) in quick.iter().filter(|(n, ..)| wanted(*n)) {
        results.push((*n, *name, catch_unwind(AssertUnwindSafe(f))));
    }

    let trend_criteria: [(u32, &str, fn(&Trend) -> Outcome); 4] = [
        (5, "forgetting trend", forgetting_trend),
        (6, "AFS trend", afs_trend),
        (7, "loss-ablation ordering", ablation_order),
        (8, "parameter efficiency", parameter_ratio),
    ];
    if trend_criteria.iter().any(|(n, ..)| wanted(*n)) {
        eprintln!("running the 5-seed trend sequence and ablations; this takes a while");
        match catch_unwind(AssertUnwindSafe(|| run_trend(tmp.path()))) {
            Ok(Ok(trend)) => {
                for (n, name, f) in trend_criteria.iter().filter(|(n, ..)| wanted(*n)) {
                    results.push((*n, *name, catch_unwind(AssertUnwindSafe(|| f(&trend)))));
                }
            }
            other => {
                let msg = match other {
                    Ok(Err(e)) => e,
                    _ => "trend run panicked".into(),
                };
                for (n, name, _) in trend_criteria.iter().filter(|(n, ..)| wanted(*n)) {
                    results.push((*n, *name, Ok(Err(format!("trend run failed: {msg}")))));
                }
            }
        }
    }
    results.sort_by_key(|(n, ..)| *n);
    for (n, name, outcome) in results {
        report(n, name, outcome);
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
