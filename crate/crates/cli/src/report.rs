//! `report`: comparison table, per-dataset recall curves and AFS tables from
//! one or more run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ptat::baselines::StrategyTag;
use ptat::eval::{anti_forgetting_score, Direction, MetricsHistory, KS};

use crate::run::RunManifest;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Table,
    Curves,
    Afs,
}

impl std::str::FromStr for ReportKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "table" => Ok(Self::Table),
            "curves" => Ok(Self::Curves),
            "afs" => Ok(Self::Afs),
            other => Err(CliError::Validation(format!("unknown report kind `{other}` (table, curves, afs)"))),
        }
    }
}

/// Every run found in the given directories.
#[derive(Debug, Clone)]
pub struct RunSet {
    pub num_steps: usize,
    pub datasets: Vec<String>,
    /// Histories grouped by strategy, in seed order.
    pub runs: BTreeMap<StrategyTag, Vec<MetricsHistory>>,
}

pub fn load_runs(dirs: &[PathBuf], force: bool) -> Result<RunSet, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Validation("report needs at least one run directory".into()));
    }
    let mut hashes = Vec::new();
    let mut set: Option<RunSet> = None;
    for dir in dirs {
        let manifest = RunManifest::load(dir)?;
        hashes.push((dir.clone(), manifest.config_hash.clone()));
        let s = set.get_or_insert_with(|| RunSet {
            num_steps: manifest.num_steps,
            datasets: manifest.datasets.clone(),
            runs: BTreeMap::new(),
        });
        if s.datasets != manifest.datasets {
            if !force {
                return Err(CliError::Validation(format!("{} uses a different dataset order", dir.display())));
            }
            s.num_steps = s.num_steps.max(manifest.num_steps);
        }
        for entry in &manifest.runs {
            let path = dir.join(&entry.metrics);
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let history = MetricsHistory::from_jsonl(&text)?;
            s.runs.entry(entry.strategy).or_default().push(history);
        }
    }
    let first = &hashes[0].1;
    if let Some((dir, h)) = hashes.iter().find(|(_, h)| h != first) {
        if !force {
            return Err(CliError::Validation(format!(
                "config hash of {} ({}) differs from {} ({}); pass --force to compare anyway",
                dir.display(),
                &h[..12],
                hashes[0].0.display(),
                &first[..12]
            )));
        }
    }
    let mut set = set.expect("at least one directory");
    for hs in set.runs.values_mut() {
        hs.sort_by_key(|h| h.seed);
    }
    Ok(set)
}

/// Every (step, dataset) cell the protocol requires but `history` lacks.
pub fn missing_cells(history: &MetricsHistory, datasets: &[String], num_steps: usize) -> Vec<String> {
    let mut gaps = Vec::new();
    for step in 1..=num_steps {
        for ds in datasets.iter().take(step) {
            let complete = Direction::BOTH.iter().all(|&d| KS.iter().all(|&k| history.get(step, ds, d, k).is_some()));
            if !complete {
                gaps.push(format!("(step {step}, {ds})"));
            }
        }
    }
    gaps
}

fn require_complete(set: &RunSet) -> Result<(), CliError> {
    let mut problems = Vec::new();
    for (tag, hs) in &set.runs {
        for h in hs {
            let gaps = missing_cells(h, &set.datasets, set.num_steps);
            if !gaps.is_empty() {
                problems.push(format!("{tag} seed {}: missing {}", h.seed, gaps.join(", ")));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("incomplete runs:\n  {}", problems.join("\n  "))))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final-step recalls per dataset and their average, seed-averaged, one row
/// per strategy.
pub fn table_csv(set: &RunSet) -> Result<String, CliError> {
    require_complete(set)?;
    let cols: Vec<(Direction, usize)> = Direction::BOTH.iter().flat_map(|&d| KS.iter().map(move |&k| (d, k))).collect();
    let mut out = String::from("strategy,seeds,trainable_params,full_params,trainable_ratio");
    for ds in set.datasets.iter().map(String::as_str).chain(["average"]) {
        for (d, k) in &cols {
            write!(out, ",{ds}_{d}_r{k}").unwrap();
        }
    }
    out.push('\n');
    let last = set.num_steps;
    for (tag, hs) in &set.runs {
        let h0 = &hs[0];
        write!(out, "{tag},{},{},{},{}", hs.len(), h0.trainable_params, h0.full_params, h0.trainable_ratio()).unwrap();
        let mut avg = vec![Vec::new(); cols.len()];
        for ds in &set.datasets {
            for (i, &(d, k)) in cols.iter().enumerate() {
                let per_seed: Vec<f64> = hs.iter().map(|h| h.get(last, ds, d, k).expect("checked complete")).collect();
                let m = mean(&per_seed);
                avg[i].push(m);
                write!(out, ",{m:.6}").unwrap();
            }
        }
        for a in &avg {
            write!(out, ",{:.6}", mean(a)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Seed-averaged AFS per strategy and dataset in both directions.
pub fn afs_csv(set: &RunSet) -> Result<String, CliError> {
    require_complete(set)?;
    let mut out = String::from("strategy,dataset,seeds,afs_t2a,afs_a2t\n");
    for (tag, hs) in &set.runs {
        for ds in &set.datasets {
            let mut cells = Vec::new();
            for dir in [Direction::T2a, Direction::A2t] {
                let vals: Result<Vec<f64>, _> = hs.iter().map(|h| anti_forgetting_score(h, ds, dir).map(|e| e.afs)).collect();
                cells.push(match vals {
                    Ok(v) => format!("{:.6}", mean(&v)),
                    Err(ptat::Error::UndefinedAfs(_)) => "undefined".to_string(),
                    Err(e) => return Err(e.into()),
                });
            }
            writeln!(out, "{tag},{ds},{},{},{}", hs.len(), cells[0], cells[1]).unwrap();
        }
    }
    Ok(out)
}

const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Recall@10 (mean of both directions and all seeds) against step, one
/// polyline per strategy. Plotted values are repeated in comments.
pub fn curve_svg(set: &RunSet, dataset: &str) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let steps = set.num_steps.max(2);
    let x = |s: usize| pad + (s - 1) as f64 * (w - 2.0 * pad) / (steps - 1) as f64;
    let y = |r: f64| h - pad - r * (h - 2.0 * pad);
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(svg, "<!-- dataset={dataset} metric=recall@10 mean_over=directions,seeds -->").unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    )
    .unwrap();
    for s in 1..=set.num_steps {
        writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{s}</text>"#, x(s), h - pad + 16.0).unwrap();
    }
    for r in [0.0, 0.5, 1.0] {
        writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{r:.1}</text>"#, pad - 6.0, y(r) + 4.0).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="18" font-size="13" text-anchor="middle">{dataset}: recall@10 by step</text>"#, w / 2.0).unwrap();
    for (i, (tag, hs)) in set.runs.iter().enumerate() {
        let mut points = Vec::new();
        for s in 1..=set.num_steps {
            let vals: Vec<f64> = hs
                .iter()
                .flat_map(|h| Direction::BOTH.iter().filter_map(move |&d| h.get(s, dataset, d, 10)))
                .collect();
            if !vals.is_empty() {
                let r = mean(&vals);
                writeln!(svg, "<!-- data strategy={tag} step={s} recall10={r:.6} -->").unwrap();
                points.push(format!("{:.1},{:.1}", x(s), y(r)));
            }
        }
        let color = COLORS[i % COLORS.len()];
        writeln!(svg, r#"<polyline data-strategy="{tag}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{tag}</text>"#, w - pad + 4.0 - 100.0, pad + 14.0 * i as f64).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the requested report into `out` and returns the files written.
pub fn write_report(set: &RunSet, kind: ReportKind, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut files = Vec::new();
    let mut write = |name: String, text: String| -> Result<(), CliError> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        files.push(p);
        Ok(())
    };
    match kind {
        ReportKind::Table => write("table.csv".into(), table_csv(set)?)?,
        ReportKind::Afs => write("afs.csv".into(), afs_csv(set)?)?,
        ReportKind::Curves => {
            require_complete(set)?;
            for ds in &set.datasets {
                write(format!("curve_{ds}.svg"), curve_svg(set, ds))?;
            }
        }
    }
    Ok(files)
}
