//! `run`: executes every (strategy, seed) combination of a config and writes
//! metrics, snapshots and a manifest under the output directory.
//!
//! Layout:
//! ```text
//! out/config.toml                         verbatim copy of the input
//! out/backbone.snap                       pretrained backbone shared by all runs
//! out/manifest.json
//! out/<strategy>/seed<seed>/metrics.jsonl
//! out/<strategy>/seed<seed>/metrics.csv
//! out/<strategy>/seed<seed>/snapshots/step<k>.snap
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ptat::baselines::StrategyTag;
use ptat::continual::{pretrain_backbone, run_sequence, Checkpoints};
use ptat::data::{generate_domain, DomainData};
use ptat::model::config_hash;
use ptat::params::ParamStore;
use ptat::snapshot::{load_snapshot, save_snapshot, ModelSnapshot};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BACKBONE_FILE: &str = "backbone.snap";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CSV_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces `run.seeds` when set.
    pub seeds: Option<Vec<u64>>,
    pub resume: bool,
    pub force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub strategy: StrategyTag,
    pub seed: u64,
    /// Relative to the output directory.
    pub metrics: PathBuf,
    pub csv: PathBuf,
    pub trainable_params: usize,
    pub full_params: usize,
    pub trainable_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    /// Hash of the sections that make runs comparable.
    pub config_hash: String,
    pub num_steps: usize,
    /// Dataset names in introduction order.
    pub datasets: Vec<String>,
    pub runs: Vec<RunEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

/// Outcome of one (strategy, seed) run.
#[derive(Debug, Clone)]
pub struct JobOutcome {
    pub entry: RunEntry,
    /// Steps actually trained; 0 when everything was resumed.
    pub trained_steps: usize,
}

pub fn run_dir(out: &Path, tag: StrategyTag, seed: u64) -> PathBuf {
    out.join(tag.as_str()).join(format!("seed{seed}"))
}

pub fn seeds(cfg: &RunConfig, opts: &RunOptions) -> Vec<u64> {
    opts.seeds.clone().unwrap_or_else(|| cfg.run.seeds.clone())
}

/// Every (strategy, seed) combination in config order.
pub fn jobs(cfg: &RunConfig, opts: &RunOptions) -> Vec<(StrategyTag, u64)> {
    let seeds = seeds(cfg, opts);
    cfg.run.strategies.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect()
}

/// Snapshots under `<run dir>/snapshots`, consulted only when resuming.
struct DirCheckpoints {
    dir: PathBuf,
    hash: [u8; 32],
    resume: bool,
}

impl DirCheckpoints {
    fn path(&self, key: usize) -> PathBuf {
        self.dir.join(format!("step{key}.snap"))
    }
}

impl Checkpoints for DirCheckpoints {
    fn load(&mut self, key: usize) -> ptat::Result<Option<ModelSnapshot>> {
        let path = self.path(key);
        if !self.resume || !path.exists() {
            return Ok(None);
        }
        load_snapshot(&path, Some(&self.hash)).map(Some)
    }

    fn save(&mut self, key: usize, snapshot: &ModelSnapshot) -> ptat::Result<()> {
        fs::create_dir_all(&self.dir).map_err(ptat::SnapshotError::Io)?;
        save_snapshot(snapshot, &self.path(key))
    }
}

fn backbone_hash(cfg: &RunConfig) -> [u8; 32] {
    let key = (cfg.model_config(), &cfg.data, &cfg.pretrain);
    Sha256::digest(serde_json::to_vec(&key).expect("config serialises")).into()
}

/// Loads the shared backbone, pretraining and saving it first if absent.
pub fn ensure_backbone(out: &Path, cfg: &RunConfig) -> Result<ParamStore, CliError> {
    let path = out.join(BACKBONE_FILE);
    let hash = backbone_hash(cfg);
    if path.exists() {
        return Ok(load_snapshot(&path, Some(&hash))?.params().clone());
    }
    let params = pretrain_backbone(&cfg.model_config(), &cfg.sequence_config(cfg.pretrain.seed), &cfg.pretrain)?;
    let snap = ModelSnapshot::new(&params, hash, 0);
    save_snapshot(&snap, &path)?;
    Ok(snap.params().clone())
}

/// Domains of one seed in the configured order.
pub fn domains(cfg: &RunConfig, seed: u64) -> Result<Vec<DomainData>, CliError> {
    let mut spec = cfg.sequence_config(seed).build(cfg.vocab_size())?;
    if !cfg.ablation.order.is_empty() {
        spec = spec.permuted(&cfg.ablation.order)?;
    }
    Ok(spec.domains.iter().map(generate_domain).collect::<ptat::Result<_>>()?)
}

/// Checks the output directory and records the config. Without `resume` or
/// `force`, an existing run directory is an error; `force` removes the
/// files this config would write.
pub fn prepare(out: &Path, config_text: &str, cfg: &RunConfig, opts: &RunOptions) -> Result<(), CliError> {
    let config_path = out.join(CONFIG_FILE);
    if config_path.exists() {
        if opts.force {
            for (tag, seed) in jobs(cfg, opts) {
                let dir = run_dir(out, tag, seed);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                }
            }
            for f in [MANIFEST_FILE, BACKBONE_FILE] {
                let p = out.join(f);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
                }
            }
        } else if opts.resume {
            let previous = fs::read_to_string(&config_path).map_err(|e| CliError::io(&config_path, e))?;
            let previous = RunConfig::parse(&previous).map_err(|e| CliError::Validation(e.to_string()))?;
            if previous.comparable_hash() != cfg.comparable_hash() {
                return Err(CliError::Validation(format!(
                    "{} holds a run of a different config; use another --out or --force",
                    out.display()
                )));
            }
        } else {
            return Err(CliError::Validation(format!(
                "{} already holds a run; pass --resume to continue it or --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    fs::write(&config_path, config_text).map_err(|e| CliError::io(&config_path, e))?;
    Ok(())
}

/// Runs one (strategy, seed) combination and writes its metrics.
pub fn run_job(out: &Path, cfg: &RunConfig, backbone: &ParamStore, tag: StrategyTag, seed: u64, resume: bool) -> Result<JobOutcome, CliError> {
    let domains = domains(cfg, seed)?;
    let model_cfg = cfg.model_config();
    let dir = run_dir(out, tag, seed);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut checkpoints = DirCheckpoints { dir: dir.join("snapshots"), hash: config_hash(&model_cfg, tag), resume };
    let result = run_sequence(&domains, backbone, &model_cfg, tag, &cfg.train_config(seed), &mut checkpoints)?;
    let h = &result.history;
    let metrics = dir.join(METRICS_FILE);
    let csv = dir.join(CSV_FILE);
    fs::write(&metrics, h.to_jsonl()).map_err(|e| CliError::io(&metrics, e))?;
    fs::write(&csv, h.to_csv()).map_err(|e| CliError::io(&csv, e))?;
    let rel = |p: &Path| p.strip_prefix(out).unwrap_or(p).to_path_buf();
    Ok(JobOutcome {
        entry: RunEntry {
            strategy: tag,
            seed,
            metrics: rel(&metrics),
            csv: rel(&csv),
            trainable_params: h.trainable_params,
            full_params: h.full_params,
            trainable_ratio: h.trainable_ratio(),
        },
        trained_steps: result.trained_steps,
    })
}

pub fn write_manifest(out: &Path, cfg: &RunConfig, entries: Vec<RunEntry>) -> Result<RunManifest, CliError> {
    let mut names: Vec<String> = (1..=cfg.data.num_domains).map(|m| format!("domain{m}")).collect();
    if !cfg.ablation.order.is_empty() {
        names = cfg.ablation.order.iter().map(|&i| format!("domain{}", i + 1)).collect();
    }
    let manifest = RunManifest {
        format: "ptat-run v1".into(),
        config_hash: cfg.comparable_hash(),
        num_steps: cfg.data.num_domains,
        datasets: names,
        runs: entries,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// Runs every job in this process.
pub fn run_experiment(
    out: &Path,
    config_text: &str,
    cfg: &RunConfig,
    opts: &RunOptions,
    mut progress: impl FnMut(&JobOutcome),
) -> Result<(RunManifest, Vec<JobOutcome>), CliError> {
    prepare(out, config_text, cfg, opts)?;
    let backbone = ensure_backbone(out, cfg)?;
    let mut outcomes = Vec::new();
    for (tag, seed) in jobs(cfg, opts) {
        let o = run_job(out, cfg, &backbone, tag, seed, opts.resume)?;
        progress(&o);
        outcomes.push(o);
    }
    let manifest = write_manifest(out, cfg, outcomes.iter().map(|o| o.entry.clone()).collect())?;
    Ok((manifest, outcomes))
}
