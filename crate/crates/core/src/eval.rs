//! Retrieval metrics, the anti-forgetting score and metric export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use diffmath::Matrix;
use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::model::ModelState;

pub const KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    A2t,
    T2a,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::A2t, Direction::T2a];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::A2t => "a2t",
            Direction::T2a => "t2a",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fraction of rows whose diagonal entry ranks within the top `k`. Equal
/// scores rank the lower column index first.
pub fn recall_at_k(c: &Matrix, k: usize) -> Result<f64> {
    let n = c.rows();
    if c.cols() != n {
        return Err(Error::Config(format!("recall_at_k needs a square matrix, got {}x{}", n, c.cols())));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if n == 0 {
        return Err(Error::TooFewPairs(0));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = c.row(i);
            let target = row[i];
            let ahead = row.iter().enumerate().filter(|&(j, &v)| v > target || (v == target && j < i)).count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// R@1/5/10 in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub a2t: [f64; 3],
    pub t2a: [f64; 3],
}

impl RetrievalScores {
    pub fn get(&self, dir: Direction) -> [f64; 3] {
        match dir {
            Direction::A2t => self.a2t,
            Direction::T2a => self.t2a,
        }
    }
}

/// Scores from an audio-by-text similarity matrix.
pub fn scores_from_similarity(c: &Matrix) -> Result<RetrievalScores> {
    let ct = c.transpose();
    let mut a2t = [0.0; 3];
    let mut t2a = [0.0; 3];
    for (i, &k) in KS.iter().enumerate() {
        a2t[i] = recall_at_k(c, k)?;
        t2a[i] = recall_at_k(&ct, k)?;
    }
    Ok(RetrievalScores { a2t, t2a })
}

/// Embeds the whole split once and scores the cosine similarity matrix.
pub fn evaluate_retrieval(model: &ModelState, dataset: &PairedDataset) -> Result<RetrievalScores> {
    if dataset.len() < 2 {
        return Err(Error::TooFewPairs(dataset.len()));
    }
    let (ea, et) = model.embed_all(&dataset.spectrograms(), &dataset.token_slices())?;
    let c = ea.matmul_t(false, &et, true)?;
    scores_from_similarity(&c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub dataset: String,
    pub direction: Direction,
    pub k: usize,
    pub recall: f64,
    pub strategy: String,
    pub seed: u64,
    pub trainable_params: usize,
    /// Parameter count of full fine-tuning on the same backbone.
    pub full_params: usize,
}

type Key = (usize, String, Direction, usize);

/// Recall records across all steps of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsHistory {
    pub strategy: String,
    pub seed: u64,
    pub trainable_params: usize,
    pub full_params: usize,
    records: BTreeMap<Key, f64>,
    /// Datasets in order of introduction.
    datasets: Vec<String>,
}

impl MetricsHistory {
    pub fn new(strategy: impl Into<String>, seed: u64, trainable_params: usize, full_params: usize) -> Self {
        Self { strategy: strategy.into(), seed, trainable_params, full_params, ..Default::default() }
    }

    /// `trainable_params / full_params`.
    pub fn trainable_ratio(&self) -> f64 {
        self.trainable_params as f64 / self.full_params as f64
    }

    pub fn insert(&mut self, step: usize, dataset: &str, direction: Direction, k: usize, recall: f64) -> Result<()> {
        let key = (step, dataset.to_string(), direction, k);
        if self.records.contains_key(&key) {
            return Err(Error::DuplicateRecord(format!("(step {step}, {dataset}, {direction}, k={k})")));
        }
        if !self.datasets.iter().any(|d| d == dataset) {
            self.datasets.push(dataset.to_string());
        }
        self.records.insert(key, recall);
        Ok(())
    }

    pub fn insert_scores(&mut self, step: usize, dataset: &str, scores: &RetrievalScores) -> Result<()> {
        for dir in Direction::BOTH {
            for (i, &k) in KS.iter().enumerate() {
                self.insert(step, dataset, dir, k, scores.get(dir)[i])?;
            }
        }
        Ok(())
    }

    pub fn get(&self, step: usize, dataset: &str, direction: Direction, k: usize) -> Option<f64> {
        self.records.get(&(step, dataset.to_string(), direction, k)).copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn datasets(&self) -> &[String] {
        &self.datasets
    }

    pub fn steps(&self) -> BTreeSet<usize> {
        self.records.keys().map(|k| k.0).collect()
    }

    pub fn final_step(&self) -> Option<usize> {
        self.steps().last().copied()
    }

    /// First step with any record for `dataset`.
    pub fn introduced_at(&self, dataset: &str) -> Option<usize> {
        self.records.keys().filter(|k| k.1 == dataset).map(|k| k.0).min()
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.records
            .iter()
            .map(|((step, dataset, direction, k), &recall)| MetricRecord {
                step: *step,
                dataset: dataset.clone(),
                direction: *direction,
                k: *k,
                recall,
                strategy: self.strategy.clone(),
                seed: self.seed,
                trainable_params: self.trainable_params,
                full_params: self.full_params,
            })
            .collect()
    }

    pub fn from_records(records: &[MetricRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::MissingRecords("no records".into()))?;
        let mut h = Self::new(first.strategy.clone(), first.seed, first.trainable_params, first.full_params);
        let mut ordered: Vec<&MetricRecord> = records.iter().collect();
        ordered.sort_by_key(|r| r.step);
        for r in ordered {
            h.insert(r.step, &r.dataset, r.direction, r.k, r.recall)?;
        }
        Ok(h)
    }

    /// One JSON object per line, ordered by (step, dataset, direction, k).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&serde_json::to_string(&r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("metrics line {}: {e}", i + 1))))
            .collect::<Result<Vec<MetricRecord>>>()?;
        Self::from_records(&records)
    }

    /// One row per (step, dataset) with all six recalls.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,seed,step,dataset,a2t_r1,a2t_r5,a2t_r10,t2a_r1,t2a_r5,t2a_r10,trainable_params,full_params\n");
        for step in self.steps() {
            for ds in &self.datasets {
                let vals: Vec<Option<f64>> = Direction::BOTH
                    .iter()
                    .flat_map(|&d| KS.iter().map(move |&k| (d, k)))
                    .map(|(d, k)| self.get(step, ds, d, k))
                    .collect();
                if vals.iter().all(Option::is_none) {
                    continue;
                }
                let cells: Vec<String> = vals.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
                out.push_str(&format!(
                    "{},{},{step},{ds},{},{},{}\n",
                    self.strategy,
                    self.seed,
                    cells.join(","),
                    self.trainable_params,
                    self.full_params
                ));
            }
        }
        out
    }
}

/// AFS for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfsEntry {
    pub dataset: String,
    pub first_step: usize,
    pub recall_first: f64,
    pub recall_final: f64,
    pub afs: f64,
}

/// `R@10 at the final step / R@10 at the step the dataset was introduced`.
pub fn anti_forgetting_score(history: &MetricsHistory, dataset: &str, direction: Direction) -> Result<AfsEntry> {
    let first = history
        .introduced_at(dataset)
        .ok_or_else(|| Error::MissingRecords(format!("no records for {dataset}")))?;
    let last = history.final_step().expect("history has records");
    let at = |step| {
        history
            .get(step, dataset, direction, 10)
            .ok_or_else(|| Error::MissingRecords(format!("(step {step}, {dataset}, {direction}, k=10)")))
    };
    let (r0, r1) = (at(first)?, at(last)?);
    if r0 == 0.0 {
        return Err(Error::UndefinedAfs(dataset.to_string()));
    }
    Ok(AfsEntry { dataset: dataset.to_string(), first_step: first, recall_first: r0, recall_final: r1, afs: r1 / r0 })
}

/// AFS of every dataset, text-to-audio by default.
pub fn afs_report(history: &MetricsHistory, direction: Direction) -> Result<Vec<AfsEntry>> {
    history.datasets().iter().map(|d| anti_forgetting_score(history, d, direction)).collect()
}

/// Unweighted mean over datasets of each (direction, k) at the final step.
pub fn average_metrics(history: &MetricsHistory) -> Result<BTreeMap<(Direction, usize), f64>> {
    let last = history.final_step().ok_or_else(|| Error::MissingRecords("empty history".into()))?;
    let mut gaps = Vec::new();
    let mut out = BTreeMap::new();
    for dir in Direction::BOTH {
        for k in KS {
            let mut sum = 0.0;
            for ds in history.datasets() {
                match history.get(last, ds, dir, k) {
                    Some(v) => sum += v,
                    None => gaps.push(format!("(step {last}, {ds}, {dir}, k={k})")),
                }
            }
            out.insert((dir, k), sum / history.datasets().len() as f64);
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MissingRecords(gaps.join(", ")));
    }
    Ok(out)
}
