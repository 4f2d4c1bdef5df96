//! Paired embedding sets: the `LCE1` file format, a JSON-lines converter,
//! the seeded synthetic generator and minibatch sampling.
//!
//! `LCE1` layout, little-endian throughout:
//!
//! ```text
//! "LCE1" | u32 version=1 | u32 n | u32 d1 | u32 d2 | u8 has_labels
//! | u8 split_tag (0 train, 1 val, 2 test) | 2 reserved bytes = 0
//! | n×d1 f32 | n×d2 f32 | (has_labels) n×u32
//! ```

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"LCE1";
pub const EMBEDDING_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn code(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SplitTag::Train),
            1 => Ok(SplitTag::Val),
            2 => Ok(SplitTag::Test),
            other => Err(Error::Format(format!("unknown split tag {other}"))),
        }
    }
}

/// `n` aligned rows of (modality-1 embedding, modality-2 embedding), as
/// produced by frozen upstream encoders. Row `i` of `m1` and row `i` of
/// `m2` are a true pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEmbeddingSet {
    m1: Tensor<f32>,
    m2: Tensor<f32>,
    labels: Option<Vec<u32>>,
    split: SplitTag,
}

impl PairedEmbeddingSet {
    pub fn new(
        m1: Tensor<f32>,
        m2: Tensor<f32>,
        labels: Option<Vec<u32>>,
        split: SplitTag,
    ) -> Result<Self> {
        if m1.rank() != 2 || m2.rank() != 2 || m1.rows() != m2.rows() {
            return Err(Error::Shape {
                op: "PairedEmbeddingSet",
                lhs: m1.shape().to_vec(),
                rhs: m2.shape().to_vec(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != m1.rows() {
                return Err(Error::contract(format!(
                    "{} labels for {} rows",
                    l.len(),
                    m1.rows()
                )));
            }
        }
        check_finite(&m1, "m1")?;
        check_finite(&m2, "m2")?;
        Ok(PairedEmbeddingSet {
            m1,
            m2,
            labels,
            split,
        })
    }

    pub fn n(&self) -> usize {
        self.m1.rows()
    }

    pub fn d1(&self) -> usize {
        self.m1.cols()
    }

    pub fn d2(&self) -> usize {
        self.m2.cols()
    }

    pub fn m1(&self) -> &Tensor<f32> {
        &self.m1
    }

    pub fn m2(&self) -> &Tensor<f32> {
        &self.m2
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Labels or a contract error naming the caller.
    pub fn require_labels(&self, who: &str) -> Result<&[u32]> {
        self.labels()
            .ok_or_else(|| Error::contract(format!("{who} needs a labeled set")))
    }

    /// `max(label) + 1`, or 0 for an unlabeled set.
    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.n()) {
            return Err(Error::contract("subset indices empty or out of range"));
        }
        Ok(PairedEmbeddingSet {
            m1: self.m1.select_rows(idx),
            m2: self.m2.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            split: self.split,
        })
    }

    /// Both sides of rows `idx` in working precision.
    pub fn batch<F: Real>(&self, idx: &[usize]) -> (Tensor<F>, Tensor<F>) {
        (
            self.m1.select_rows(idx).cast(),
            self.m2.select_rows(idx).cast(),
        )
    }

    /// Deterministic split into `(train, val)` with `round(n·fraction)`
    /// (at least one) validation rows chosen by a seeded permutation.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::contract(format!(
                "validation fraction {fraction} outside (0, 1)"
            )));
        }
        let n_val = ((self.n() as f64 * fraction).round() as usize).max(1);
        if n_val >= self.n() {
            return Err(Error::contract(format!(
                "cannot hold out {n_val} of {} rows",
                self.n()
            )));
        }
        let perm = Rng::with_stream(seed, VALIDATION_STREAM).permutation(self.n());
        let (val_idx, train_idx) = perm.split_at(n_val);
        let mut val_idx = val_idx.to_vec();
        let mut train_idx = train_idx.to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((
            self.subset(&train_idx)?.with_split(SplitTag::Train),
            self.subset(&val_idx)?.with_split(SplitTag::Val),
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (self.d1() + self.d2() + 1));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        for v in [n, self.d1(), self.d2()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.labels.is_some() as u8);
        out.push(self.split.code());
        out.extend_from_slice(&[0, 0]);
        for &x in self.m1.data().iter().chain(self.m2.data()) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(l) = &self.labels {
            for &c in l {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::Format("missing LCE1 magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "header truncated at {} bytes",
                bytes.len()
            )));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != EMBEDDING_VERSION {
            return Err(Error::Version {
                expected: EMBEDDING_VERSION,
                found: version,
            });
        }
        let (n, d1, d2) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let has_labels = match bytes[20] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("has_labels byte {other}"))),
        };
        let split = SplitTag::from_code(bytes[21])?;
        if bytes[22] != 0 || bytes[23] != 0 {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        if n == 0 || d1 == 0 || d2 == 0 {
            return Err(Error::Format(format!("empty extents n={n} d1={d1} d2={d2}")));
        }
        let expected = HEADER_LEN + 4 * (n * (d1 + d2) + if has_labels { n } else { 0 });
        if bytes.len() < expected {
            return Err(Error::Corrupt(format!(
                "payload truncated: {} of {expected} bytes",
                bytes.len()
            )));
        }
        if bytes.len() > expected {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let floats = |start: usize, count: usize| -> Vec<f32> {
            bytes[start..start + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let off1 = HEADER_LEN;
        let off2 = off1 + 4 * n * d1;
        let off3 = off2 + 4 * n * d2;
        let m1 = Tensor::new(&[n, d1], floats(off1, n * d1))?;
        let m2 = Tensor::new(&[n, d2], floats(off2, n * d2))?;
        let labels = has_labels.then(|| {
            bytes[off3..off3 + 4 * n]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        });
        PairedEmbeddingSet::new(m1, m2, labels, split)
    }
}

const VALIDATION_STREAM: u64 = u64::MAX - 1;

fn check_finite(t: &Tensor<f32>, what: &'static str) -> Result<()> {
    let d = t.cols();
    match t.data().iter().position(|x| !x.is_finite()) {
        Some(pos) => Err(Error::NonFinite { what, row: pos / d }),
        None => Ok(()),
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<PairedEmbeddingSet> {
    PairedEmbeddingSet::from_bytes(&fs::read(path)?)
}

pub fn save_embeddings(set: &PairedEmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, set.to_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRow {
    m1: Vec<f32>,
    m2: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
}

/// Reads one JSON object per line with fields `m1`, `m2` and optional
/// `label`. Blank lines are skipped; labels must be on every row or none.
pub fn read_jsonl(reader: impl BufRead, split: SplitTag) -> Result<PairedEmbeddingSet> {
    let (mut m1, mut m2, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    let (mut d1, mut d2) = (None, None);
    let mut rows = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        let (e1, e2) = (*d1.get_or_insert(row.m1.len()), *d2.get_or_insert(row.m2.len()));
        if row.m1.len() != e1 || row.m2.len() != e2 {
            return Err(Error::Format(format!(
                "line {}: dimensions ({}, {}) differ from first row ({e1}, {e2})",
                lineno + 1,
                row.m1.len(),
                row.m2.len()
            )));
        }
        if (row.label.is_some()) != (rows == labels.len()) && rows > 0 {
            return Err(Error::Format(format!(
                "line {}: labels must be present on all rows or none",
                lineno + 1
            )));
        }
        m1.extend(row.m1);
        m2.extend(row.m2);
        labels.extend(row.label);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Format("no rows".into()));
    }
    let (d1, d2) = (d1.unwrap_or(0), d2.unwrap_or(0));
    if d1 == 0 || d2 == 0 {
        return Err(Error::Format("zero-width embedding".into()));
    }
    let labels = (labels.len() == rows).then_some(labels);
    PairedEmbeddingSet::new(
        Tensor::new(&[rows, d1], m1)?,
        Tensor::new(&[rows, d2], m2)?,
        labels,
        split,
    )
}

pub fn write_jsonl(set: &PairedEmbeddingSet, mut out: impl Write) -> Result<()> {
    for i in 0..set.n() {
        let row = JsonRow {
            m1: set.m1.row(i).to_vec(),
            m2: set.m2.row(i).to_vec(),
            label: set.labels().map(|l| l[i]),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// -------------------------------------------------------------------
// Synthetic paired data

/// Parameters of the synthetic paired-embedding generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_latent: usize,
    pub d1: usize,
    pub d2: usize,
    pub noise_sigma: f64,
    pub num_classes: usize,
    pub seed: u64,
    /// Standard deviation of the class means in latent space.
    #[serde(default = "default_class_spread")]
    pub class_spread: f64,
}

pub const DEFAULT_CLASS_SPREAD: f64 = 4.0;

fn default_class_spread() -> f64 {
    DEFAULT_CLASS_SPREAD
}

impl SyntheticSpec {
    /// The desk-scale reference configuration.
    pub fn standard(n: usize, seed: u64) -> Self {
        SyntheticSpec {
            n,
            d_latent: 8,
            d1: 32,
            d2: 48,
            noise_sigma: 0.1,
            num_classes: 10,
            seed,
            class_spread: DEFAULT_CLASS_SPREAD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d_latent == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::contract(format!(
                "synthetic extents must be positive: n={} d_latent={} d1={} d2={}",
                self.n, self.d_latent, self.d1, self.d2
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::contract("num_classes must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract(format!("noise_sigma {}", self.noise_sigma)));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return Err(Error::contract(format!("class_spread {}", self.class_spread)));
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.d_latent > self.d1.min(self.d2) {
            w.push(format!(
                "d_latent {} exceeds min(d1, d2) = {}; the maps cannot be injective",
                self.d_latent,
                self.d1.min(self.d2)
            ));
        }
        w
    }
}

/// The fixed random structure behind a [`SyntheticSpec`]: mixing matrices
/// `A₁ ∈ ℝ^{d1×d_latent}`, `A₂ ∈ ℝ^{d2×d_latent}` (entries N(0, 1/d_latent))
/// and class means `μ_c` (entries N(0, class_spread²)), drawn in that order
/// from stream 0 of the seed.
///
/// A sample of split `s` draws from stream `1 + code(s)`; row `i` has label
/// `i mod C`, latent `z = μ_label + N(0, I)` and emits
/// `m1 = A₁z + σε`, `m2 = A₂z + σε′`, drawing `z`, `ε`, `ε′` in that order.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    a1: Vec<f64>,
    a2: Vec<f64>,
    means: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::with_stream(spec.seed, 0);
        let scale = 1.0 / (spec.d_latent as f64).sqrt();
        let mut draw = |count: usize, s: f64| -> Vec<f64> {
            (0..count).map(|_| rng.normal() * s).collect()
        };
        let a1 = draw(spec.d1 * spec.d_latent, scale);
        let a2 = draw(spec.d2 * spec.d_latent, scale);
        let means = draw(spec.num_classes * spec.d_latent, spec.class_spread);
        Ok(SyntheticWorld {
            spec: spec.clone(),
            a1,
            a2,
            means,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn class_mean(&self, c: usize) -> &[f64] {
        let dl = self.spec.d_latent;
        &self.means[c * dl..(c + 1) * dl]
    }

    /// `(A₁z, A₂z)` without observation noise.
    pub fn project(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let dl = self.spec.d_latent;
        let apply = |a: &[f64]| -> Vec<f64> {
            a.chunks(dl)
                .map(|row| row.iter().zip(z).map(|(p, q)| p * q).sum())
                .collect()
        };
        (apply(&self.a1), apply(&self.a2))
    }

    /// Draws `n` rows for `split` together with their latents (`n × d_latent`).
    pub fn sample_with_latents(
        &self,
        n: usize,
        split: SplitTag,
    ) -> Result<(PairedEmbeddingSet, Vec<f64>)> {
        if n == 0 {
            return Err(Error::contract("synthetic sample with n = 0"));
        }
        let s = &self.spec;
        let mut rng = Rng::with_stream(s.seed, 1 + split.code() as u64);
        let mut m1 = Vec::with_capacity(n * s.d1);
        let mut m2 = Vec::with_capacity(n * s.d2);
        let mut labels = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n * s.d_latent);
        for i in 0..n {
            let c = i % s.num_classes;
            let z: Vec<f64> = self
                .class_mean(c)
                .iter()
                .map(|&mu| mu + rng.normal())
                .collect();
            let (x1, x2) = self.project(&z);
            m1.extend(x1.iter().map(|&v| (v + s.noise_sigma * rng.normal()) as f32));
            m2.extend(x2.iter().map(|&v| (v + s.noise_sigma * rng.normal()) as f32));
            labels.push(c as u32);
            latents.extend(z);
        }
        let set = PairedEmbeddingSet::new(
            Tensor::new(&[n, s.d1], m1)?,
            Tensor::new(&[n, s.d2], m2)?,
            Some(labels),
            split,
        )?;
        Ok((set, latents))
    }

    pub fn sample(&self, n: usize, split: SplitTag) -> Result<PairedEmbeddingSet> {
        Ok(self.sample_with_latents(n, split)?.0)
    }

    /// One noise-free row per class: `(A₁μ_c, A₂μ_c)` labeled `c`.
    pub fn prototypes(&self) -> PairedEmbeddingSet {
        let s = &self.spec;
        let (mut m1, mut m2) = (Vec::new(), Vec::new());
        for c in 0..s.num_classes {
            let (x1, x2) = self.project(self.class_mean(c));
            m1.extend(x1.iter().map(|&v| v as f32));
            m2.extend(x2.iter().map(|&v| v as f32));
        }
        let labels = (0..s.num_classes as u32).collect();
        PairedEmbeddingSet::new(
            Tensor::new(&[s.num_classes, s.d1], m1).expect("positive extents"),
            Tensor::new(&[s.num_classes, s.d2], m2).expect("positive extents"),
            Some(labels),
            SplitTag::Test,
        )
        .expect("finite prototypes")
    }
}

/// `spec.n` training rows from the world defined by `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PairedEmbeddingSet> {
    SyntheticWorld::new(spec)?.sample(spec.n, SplitTag::Train)
}

// -------------------------------------------------------------------
// Minibatches

/// The minibatches of one epoch: a seeded shuffle of `0..n` cut into
/// consecutive chunks of `k`. When `k` does not divide `n` the last batch
/// holds the remainder.
pub fn epoch_batches(n: usize, k: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "batch size {k} must be in 1..={n}"
        )));
    }
    let order = Rng::with_stream(seed, epoch).permutation(n);
    Ok(order.chunks(k).map(<[usize]>::to_vec).collect())
}

#[derive(Clone, Debug)]
pub struct Minibatch<F> {
    pub m1: Tensor<F>,
    pub m2: Tensor<F>,
    pub indices: Vec<usize>,
}

/// Stateful minibatch source that walks [`epoch_batches`] epoch by epoch.
#[derive(Clone, Debug)]
pub struct MinibatchSampler {
    n: usize,
    k: usize,
    seed: u64,
    epoch: u64,
    pending: std::collections::VecDeque<Vec<usize>>,
}

impl MinibatchSampler {
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        Self::starting_at(n, k, seed, 0)
    }

    pub fn starting_at(n: usize, k: usize, seed: u64, epoch: u64) -> Result<Self> {
        let pending = epoch_batches(n, k, seed, epoch)?.into();
        Ok(MinibatchSampler {
            n,
            k,
            seed,
            epoch,
            pending,
        })
    }

    /// Epoch the next batch belongs to.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            self.epoch += 1;
            self.pending = epoch_batches(self.n, self.k, self.seed, self.epoch)
                .expect("validated at construction")
                .into();
        }
        self.pending.pop_front().expect("non-empty epoch")
    }

    pub fn sample<F: Real>(&mut self, set: &PairedEmbeddingSet) -> Result<Minibatch<F>> {
        if set.n() != self.n {
            return Err(Error::contract(format!(
                "sampler built for {} rows, set has {}",
                self.n,
                set.n()
            )));
        }
        let indices = self.next_indices();
        let (m1, m2) = set.batch(&indices);
        Ok(Minibatch { m1, m2, indices })
    }
}

/// One minibatch of `k` aligned rows; `rng` is the sampler state.
pub fn sample_minibatch<F: Real>(
    set: &PairedEmbeddingSet,
    k: usize,
    rng: &mut Rng,
) -> Result<Minibatch<F>> {
    if k == 0 || k > set.n() {
        return Err(Error::contract(format!(
            "batch size {k} must be in 1..={}",
            set.n()
        )));
    }
    let mut order = rng.permutation(set.n());
    order.truncate(k);
    let (m1, m2) = set.batch(&order);
    Ok(Minibatch {
        m1,
        m2,
        indices: order,
    })
}
