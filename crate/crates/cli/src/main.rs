use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use ptat::baselines::StrategyTag;
use ptat::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use ptat_cli::config::RunConfig;
use ptat_cli::report::{load_runs, write_report, ReportKind};
use ptat_cli::run::{self, RunEntry, RunOptions};
use ptat_cli::selftest::run_selftest;
use ptat_cli::CliError;

#[derive(Parser)]
#[command(name = "ptat", version, about = "Continual audio-text retrieval with coupled prompts")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate every (strategy, seed) of a config.
    Run {
        config: PathBuf,
        /// Run only these seeds (repeatable), overriding `run.seeds`.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Reuse snapshots already present in the output directory.
        #[arg(long)]
        resume: bool,
        /// Number of worker processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Output directory, overriding `run.out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        /// Internal: run a single `strategy:seed` job in a prepared directory.
        #[arg(long, hide = true)]
        job: Option<String>,
    },
    /// Tables, curves or AFS from run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_parser = ["table", "curves", "afs"])]
        kind: String,
        /// Where report files go; defaults to the first run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare runs whose config hashes differ.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every objective and partition.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Randomised property suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(2, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Run { config, seeds, resume, parallel, out, force, job } => {
            cmd_run(&config, seeds, resume, parallel.max(1), out, force, job)
        }
        Cmd::Report { dirs, kind, out, force } => {
            let kind: ReportKind = kind.parse()?;
            let set = load_runs(&dirs, force)?;
            let out = out.unwrap_or_else(|| dirs[0].clone());
            for f in write_report(&set, kind, &out)? {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Cmd::Gradcheck { seed } => {
            let start = Instant::now();
            let cases = run_gradcheck(seed).map_err(CliError::from)?;
            let mut failed = 0;
            for c in &cases {
                let verdict = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<20} {:<24} {:>6} entries  max rel err {:.3e}  {verdict}", c.strategy, c.objective, c.entries, c.max_relative_error);
                failed += usize::from(!c.passed());
            }
            println!("{} cases in {:.1}s, tolerance {GRADCHECK_TOLERANCE:e}", cases.len(), start.elapsed().as_secs_f64());
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} gradient checks failed")).into());
            }
            Ok(())
        }
        Cmd::Selftest { seed } => {
            let checks = run_selftest(seed);
            let mut failed = 0;
            for c in &checks {
                match &c.outcome {
                    Ok(()) => println!("ok    {}", c.name),
                    Err(msg) => {
                        println!("FAIL  {}: {msg}", c.name);
                        failed += 1;
                    }
                }
            }
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} of {} self-tests failed", checks.len())).into());
            }
            Ok(())
        }
    }
}

fn parse_job(job: &str) -> anyhow::Result<(StrategyTag, u64)> {
    let (tag, seed) = job.split_once(':').ok_or_else(|| anyhow!("job must be strategy:seed"))?;
    Ok((tag.parse().map_err(CliError::from)?, seed.parse().context("job seed")?))
}

fn cmd_run(
    config: &Path,
    seeds: Vec<u64>,
    resume: bool,
    parallel: usize,
    out: Option<PathBuf>,
    force: bool,
    job: Option<String>,
) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| CliError::io(config, e))?;
    let cfg = RunConfig::parse(&text).map_err(CliError::from)?;
    let out = out
        .or_else(|| cfg.run.out.clone())
        .ok_or_else(|| CliError::Validation("no output directory: set run.out or pass --out".into()))?;
    let opts = RunOptions { seeds: (!seeds.is_empty()).then_some(seeds), resume, force };

    if let Some(job) = job {
        let (tag, seed) = parse_job(&job)?;
        let backbone = run::ensure_backbone(&out, &cfg)?;
        run::run_job(&out, &cfg, &backbone, tag, seed, resume)?;
        return Ok(());
    }

    let start = Instant::now();
    let report = |o: &run::JobOutcome| {
        println!(
            "{} seed {}: {} steps trained, trainable {} / {} = {:.6}",
            o.entry.strategy, o.entry.seed, o.trained_steps, o.entry.trainable_params, o.entry.full_params, o.entry.trainable_ratio
        );
    };
    let manifest = if parallel == 1 {
        run::run_experiment(&out, &text, &cfg, &opts, report)?.0
    } else {
        run::prepare(&out, &text, &cfg, &opts)?;
        run::ensure_backbone(&out, &cfg)?;
        run_workers(config, &out, &cfg, &opts, parallel)?
    };
    println!("{} runs in {:.1}s; manifest at {}", manifest.runs.len(), start.elapsed().as_secs_f64(), out.join(run::MANIFEST_FILE).display());
    Ok(())
}

/// Runs each job in a child process, at most `parallel` at a time.
fn run_workers(config: &Path, out: &Path, cfg: &RunConfig, opts: &RunOptions, parallel: usize) -> anyhow::Result<run::RunManifest> {
    let exe = std::env::current_exe().context("locating the ptat executable")?;
    let jobs = run::jobs(cfg, opts);
    let mut pending = jobs.iter().copied();
    let mut running: Vec<((StrategyTag, u64), Child)> = Vec::new();
    let mut failures = Vec::new();
    loop {
        while running.len() < parallel {
            let Some((tag, seed)) = pending.next() else { break };
            let mut cmd = Command::new(&exe);
            cmd.arg("run").arg(config).arg("--out").arg(out).arg("--job").arg(format!("{tag}:{seed}"));
            if opts.resume {
                cmd.arg("--resume");
            }
            running.push(((tag, seed), cmd.spawn().context("spawning worker")?));
        }
        if running.is_empty() {
            break;
        }
        let ((tag, seed), mut child) = running.remove(0);
        let status = child.wait().context("waiting for worker")?;
        if status.success() {
            println!("{tag} seed {seed}: done");
        } else {
            failures.push((format!("{tag} seed {seed}"), status.code().unwrap_or(2)));
        }
    }
    if let Some(&(_, code)) = failures.iter().max_by_key(|(_, c)| *c) {
        let names: Vec<&str> = failures.iter().map(|(n, _)| n.as_str()).collect();
        let msg = format!("workers failed: {}", names.join(", "));
        return Err(match code {
            1 => CliError::Validation(msg),
            3 => CliError::Numeric(msg),
            _ => CliError::Runtime(msg),
        }
        .into());
    }
    let mut entries: Vec<RunEntry> = Vec::new();
    for (tag, seed) in jobs {
        let dir = run::run_dir(out, tag, seed);
        let text = std::fs::read_to_string(dir.join(run::METRICS_FILE)).map_err(|e| CliError::io(&dir, e))?;
        let h = ptat::eval::MetricsHistory::from_jsonl(&text).map_err(CliError::from)?;
        let rel = |f: &str| dir.join(f).strip_prefix(out).map(Path::to_path_buf).unwrap_or_default();
        entries.push(RunEntry {
            strategy: tag,
            seed,
            metrics: rel(run::METRICS_FILE),
            csv: rel(run::CSV_FILE),
            trainable_params: h.trainable_params,
            full_params: h.full_params,
            trainable_ratio: h.trainable_ratio(),
        });
    }
    Ok(run::write_manifest(out, cfg, entries)?)
}
