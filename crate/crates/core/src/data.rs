//! Synthetic paired domains and manifest ingestion.
//!
//! Every sample is generated from a latent concept vector `z(id)`. A domain
//! renders `z` into a spectrogram through its own linear audio map plus noise,
//! and into tokens through the per-position argmax of its text logit map.
//! Consecutive domains share a fraction `overlap` of concepts and of map
//! columns, which controls the gap between them.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use diffmath::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{AudioSample, TextSample};
use crate::error::{io_err, Error, ManifestError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub audio: AudioSample,
    pub text: TextSample,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub domain: String,
    pub split: Split,
    pub samples: Vec<Pair>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn spectrograms(&self) -> Vec<&Matrix> {
        self.samples.iter().map(|p| &p.audio.spectrogram).collect()
    }

    pub fn token_slices(&self) -> Vec<&[usize]> {
        self.samples.iter().map(|p| p.text.tokens.as_slice()).collect()
    }

    /// Concatenation of several datasets under one name.
    pub fn union(name: &str, parts: &[&PairedDataset]) -> PairedDataset {
        let split = parts.first().map_or(Split::Train, |p| p.split);
        let samples = parts.iter().flat_map(|p| p.samples.iter().cloned()).collect();
        PairedDataset { domain: name.to_string(), split, samples }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub train: PairedDataset,
    pub test: PairedDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub latent_dim: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub spec_rows: usize,
    pub spec_cols: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    /// `(spec_rows * spec_cols) x latent_dim`.
    pub audio_map: Matrix,
    /// `(text_len * vocab_size) x latent_dim`.
    pub text_logit_map: Matrix,
    pub noise_sigma: f64,
    pub overlap_ratio: f64,
    pub seed: u64,
    /// Seeds `z(id)`; shared by all domains of a sequence.
    pub concept_seed: u64,
    /// Own id range starts here.
    pub id_base: u64,
    /// Id base of the previous domain, whose concepts the overlap reuses.
    pub prev_id_base: Option<u64>,
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Latent concept vector of `id`.
pub fn latent(concept_seed: u64, id: u64, k: usize) -> Vec<f64> {
    gaussian_vec(&mut ChaCha8Rng::seed_from_u64(mix(concept_seed, id)), k)
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("domain `{}`: {m}", self.name)));
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return bad(format!("overlap_ratio {} outside [0, 1]", self.overlap_ratio));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if self.latent_dim == 0 || self.text_len == 0 || self.vocab_size == 0 {
            return bad("latent_dim, text_len and vocab_size must be positive".into());
        }
        if self.num_test < 2 {
            return bad(format!("num_test {} < 2", self.num_test));
        }
        if self.audio_map.shape() != (self.spec_rows * self.spec_cols, self.latent_dim) {
            return bad("audio_map shape does not match spectrogram and latent sizes".into());
        }
        if self.text_logit_map.shape() != (self.text_len * self.vocab_size, self.latent_dim) {
            return bad("text_logit_map shape does not match text and latent sizes".into());
        }
        for (label, m) in [("audio_map", &self.audio_map), ("text_logit_map", &self.text_logit_map)] {
            if m.max_abs() == 0.0 {
                return Err(Error::DegenerateMap(format!("{}.{label}", self.name)));
            }
        }
        Ok(())
    }

    fn shared(&self, n: usize) -> usize {
        if self.prev_id_base.is_none() {
            return 0;
        }
        (self.overlap_ratio * n as f64).round() as usize
    }

    /// Latent ids of one split. The first `round(overlap * n)` reuse concepts
    /// from the tail of the previous domain's range for the same split.
    pub fn sample_ids(&self, split: Split) -> Vec<u64> {
        let (n, offset) = match split {
            Split::Train => (self.num_train, 0),
            Split::Test => (self.num_test, self.num_train as u64),
        };
        let s = self.shared(n);
        (0..n)
            .map(|i| match self.prev_id_base {
                Some(prev) if i < s => prev + offset + (n - 1 - i) as u64,
                _ => self.id_base + offset + i as u64,
            })
            .collect()
    }

    /// Renders the pair for latent `id`; a pure function of the domain and id.
    pub fn regenerate(&self, id: u64) -> Result<(AudioSample, TextSample)> {
        let z = Matrix::new(self.latent_dim, 1, latent(self.concept_seed, id, self.latent_dim))?;
        let signal = self.audio_map.matmul(&z)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, id));
        let noise = gaussian_vec(&mut rng, signal.len());
        let data: Vec<f64> = signal
            .data()
            .iter()
            .zip(&noise)
            .map(|(s, e)| (s + self.noise_sigma * e) as f32 as f64)
            .collect();
        let spectrogram = Matrix::new(self.spec_rows, self.spec_cols, data)?;
        let logits = self.text_logit_map.matmul(&z)?;
        let tokens = logits
            .data()
            .chunks(self.vocab_size)
            .map(|pos| {
                let mut best = 0;
                for (j, &v) in pos.iter().enumerate() {
                    if v > pos[best] {
                        best = j;
                    }
                }
                best
            })
            .collect();
        Ok((AudioSample { spectrogram }, TextSample { tokens }))
    }
}

pub fn generate_domain(spec: &DomainSpec) -> Result<DomainData> {
    spec.validate()?;
    let build = |split| -> Result<PairedDataset> {
        let samples = spec
            .sample_ids(split)
            .into_iter()
            .map(|id| spec.regenerate(id).map(|(audio, text)| Pair { audio, text, id }))
            .collect::<Result<_>>()?;
        Ok(PairedDataset { domain: spec.name.clone(), split, samples })
    };
    Ok(DomainData { train: build(Split::Train)?, test: build(Split::Test)? })
}

/// Parameters of a synthetic domain sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub num_domains: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub overlap: f64,
    pub latent_dim: usize,
    /// Width of the spectrogram and token-logit bases shared by every domain.
    pub basis_dim: usize,
    /// Seeds the bases and the pretraining domain, which stay fixed while
    /// `seed` varies.
    pub basis_seed: u64,
    pub noise_sigma: f64,
    pub text_len: usize,
    pub seed: u64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            num_domains: 4,
            num_train: 2000,
            num_test: 200,
            overlap: 0.3,
            latent_dim: 4,
            basis_dim: 8,
            basis_seed: 0,
            noise_sigma: 0.5,
            text_len: 10,
            seed: 0,
        }
    }
}

/// Ordered domains, step 1 first.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub domains: Vec<DomainSpec>,
}

impl SequenceSpec {
    /// Reorders domains; `order` is a permutation of `0..len`.
    pub fn permuted(&self, order: &[usize]) -> Result<SequenceSpec> {
        let mut seen = vec![false; self.domains.len()];
        if order.len() != self.domains.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Config(format!("{order:?} is not a permutation of 0..{}", self.domains.len())));
        }
        Ok(SequenceSpec { domains: order.iter().map(|&i| self.domains[i].clone()).collect() })
    }
}

fn random_map(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Matrix {
    let scale = 1.0 / (k as f64).sqrt();
    Matrix::from_fn(rows, k, |_, _| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

/// Spectrogram and token-logit bases of a sequence.
struct Bases {
    audio: Matrix,
    text: Matrix,
}

fn inherit_columns(fresh: &mut Matrix, prev: &Matrix, cols: usize) {
    for r in 0..fresh.rows() {
        for c in 0..cols {
            fresh.set(r, c, prev.get(r, c));
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::Config("num_domains must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        if self.latent_dim == 0 || self.basis_dim == 0 {
            return Err(Error::Config("latent_dim and basis_dim must be positive".into()));
        }
        if self.num_train == 0 || self.num_test < 2 {
            return Err(Error::Config("need num_train >= 1 and num_test >= 2".into()));
        }
        Ok(())
    }

    fn domain(&self, name: String, index: u64, maps: (Matrix, Matrix), prev: Option<u64>, vocab: usize) -> DomainSpec {
        DomainSpec {
            name,
            latent_dim: self.latent_dim,
            num_train: self.num_train,
            num_test: self.num_test,
            spec_rows: 32,
            spec_cols: 16,
            text_len: self.text_len,
            vocab_size: vocab,
            audio_map: maps.0,
            text_logit_map: maps.1,
            noise_sigma: self.noise_sigma,
            overlap_ratio: self.overlap,
            seed: mix(self.seed, 1000 + index),
            concept_seed: mix(self.seed, 7),
            id_base: (index + 1) << 32,
            prev_id_base: prev,
        }
    }

    fn bases(&self, vocab: usize) -> Bases {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.basis_seed, 3000));
        Bases {
            audio: random_map(&mut rng, 32 * 16, self.basis_dim),
            text: random_map(&mut rng, self.text_len * vocab, self.basis_dim),
        }
    }

    /// Domains `domain1..domainM` for a 32x16 spectrogram and `vocab`-token
    /// text. A domain's maps are the shared bases times its own random
    /// `basis_dim x k` mixing matrices; each map inherits its first
    /// `round(overlap * k)` columns from the previous domain's.
    pub fn build(&self, vocab: usize) -> Result<SequenceSpec> {
        self.validate()?;
        let k = self.latent_dim;
        let shared_cols = (self.overlap * k as f64).round() as usize;
        let bases = self.bases(vocab);
        let mut domains: Vec<DomainSpec> = Vec::with_capacity(self.num_domains);
        for m in 0..self.num_domains {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 2000 + m as u64));
            let mut audio = bases.audio.matmul(&random_map(&mut rng, self.basis_dim, k))?;
            let mut text = bases.text.matmul(&random_map(&mut rng, self.basis_dim, k))?;
            let prev = domains.last();
            if let Some(p) = prev {
                inherit_columns(&mut audio, &p.audio_map, shared_cols);
                inherit_columns(&mut text, &p.text_logit_map, shared_cols);
            }
            let prev_base = prev.map(|p| p.id_base);
            let d = self.domain(format!("domain{}", m + 1), m as u64, (audio, text), prev_base, vocab);
            d.validate()?;
            domains.push(d);
        }
        Ok(SequenceSpec { domains })
    }

    /// A held-out domain with its own id range, used to pretrain the backbone
    /// before any incremental step. Its latent excites every basis direction.
    pub fn pretrain_domain(&self, vocab: usize, num_train: usize) -> Result<DomainSpec> {
        self.validate()?;
        let bases = self.bases(vocab);
        let world = SequenceConfig { seed: self.basis_seed, ..self.clone() };
        let mut d = world.domain("pretrain".into(), 1 << 20, (bases.audio, bases.text), None, vocab);
        d.latent_dim = self.basis_dim;
        d.num_train = num_train;
        d.validate()?;
        Ok(d)
    }
}

/// Fixes the row count: random contiguous crop when longer, zero rows
/// appended when shorter.
pub fn crop_or_pad(spectrogram: &Matrix, target_len: usize, rng: &mut impl Rng) -> Result<AudioSample> {
    if target_len == 0 {
        return Err(Error::Config("target_len must be positive".into()));
    }
    if spectrogram.is_empty() {
        return Err(Error::Config("cannot crop or pad an empty spectrogram".into()));
    }
    let rows = spectrogram.rows();
    let out = if rows > target_len {
        let start = rng.random_range(0..=rows - target_len);
        spectrogram.slice_rows(start, target_len)
    } else if rows < target_len {
        let pad = Matrix::zeros(target_len - rows, spectrogram.cols());
        Matrix::stack_rows(&[spectrogram, &pad])?
    } else {
        spectrogram.clone()
    };
    Ok(AudioSample { spectrogram: out })
}

pub const MANIFEST_HEADER: &str = "ptat-manifest v1";

fn blob_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Writes `<dir>/<name>.manifest` plus one blob per sample under
/// `<dir>/<name>_blobs/`. Blob paths in the manifest are relative to `dir`.
pub fn write_manifest(dataset: &PairedDataset, dir: &Path, name: &str) -> Result<PathBuf> {
    let blob_dir = dir.join(format!("{name}_blobs"));
    fs::create_dir_all(&blob_dir).map_err(io_err(&blob_dir))?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for p in &dataset.samples {
        let rel = format!("{name}_blobs/{}.f32", p.id);
        let bytes = blob_bytes(&p.audio.spectrogram);
        let path = dir.join(&rel);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        let tokens: Vec<String> = p.text.tokens.iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{}\t{rel}\t{}\t{}\t{}\t{:08x}\n",
            p.id,
            p.audio.spectrogram.rows(),
            p.audio.spectrogram.cols(),
            tokens.join(","),
            crc32fast::hash(&bytes)
        ));
    }
    let path = dir.join(format!("{name}.manifest"));
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(text.as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

fn parse_field<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> std::result::Result<T, ManifestError> {
    s.parse().map_err(|_| ManifestError::Parse { line, reason: format!("bad {what} `{s}`") })
}

/// Loads a manifest written by [`write_manifest`] or prepared externally.
/// The domain name is the manifest's file stem.
pub fn load_manifest(path: &Path, split: Split) -> Result<PairedDataset> {
    let text = fs::read_to_string(path).map_err(ManifestError::Io)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header.trim_end() != MANIFEST_HEADER {
        return Err(ManifestError::Header(header.to_string()).into());
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 6 {
            return Err(ManifestError::Parse { line, reason: format!("expected 6 tab-separated fields, got {}", fields.len()) }.into());
        }
        let id: u64 = parse_field(line, "id", fields[0])?;
        let rows: usize = parse_field(line, "rows", fields[2])?;
        let cols: usize = parse_field(line, "cols", fields[3])?;
        let tokens = fields[4]
            .split(',')
            .map(|t| parse_field(line, "token", t))
            .collect::<std::result::Result<Vec<usize>, _>>()?;
        let expected = u32::from_str_radix(fields[5], 16)
            .map_err(|_| ManifestError::Parse { line, reason: format!("bad crc32 `{}`", fields[5]) })?;
        let blob = base.join(fields[1]);
        let bytes = match fs::read(&blob) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ManifestError::MissingBlob { line, path: blob }.into())
            }
            Err(e) => return Err(ManifestError::Io(e).into()),
        };
        let actual = crc32fast::hash(&bytes);
        if actual != expected {
            return Err(ManifestError::Checksum { line, path: blob, expected, actual }.into());
        }
        if bytes.len() != rows * cols * 4 {
            return Err(ManifestError::Dimension { line, path: blob, rows, cols, found: bytes.len() / 4 }.into());
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let spectrogram = Matrix::new(rows, cols, data)?;
        samples.push(Pair { audio: AudioSample { spectrogram }, text: TextSample { tokens }, id });
    }
    let domain = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PairedDataset { domain, split, samples })
}
