//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LCK1" | u32 version | u32 section count | section* | u32 crc32
//! section = u32 name_len | name (UTF-8) | u8 kind | body
//!   kind 0 (tensor): u8 bytes_per_scalar (4|8) | u32 rank | u32 extent* | payload
//!   kind 1 (text):   u32 byte_len | UTF-8 bytes
//! ```
//!
//! The CRC covers every byte after the magic. Section names are
//! `meta` (JSON), `param.<slot>`, `best.<slot>`, `adam.m.<slot>`,
//! `adam.v.<slot>` and `best_val`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{skeleton, Dfe, DfeParameters, ModelConfig};
use crate::optim::OptimizerState;
use crate::tensor::{Real, Tensor};
use crate::train::{EpochRecord, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TENSOR: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum SectionData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    /// Empty for text sections.
    pub shape: Vec<usize>,
    pub data: SectionData,
}

impl Section {
    pub fn tensor<F: Real>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        let data = if F::BYTES == 4 {
            SectionData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
        } else {
            SectionData::F64(t.data().iter().map(|v| v.as_f64()).collect())
        };
        Section {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn text(name: impl Into<String>, text: String) -> Self {
        Section {
            name: name.into(),
            shape: Vec::new(),
            data: SectionData::Text(text),
        }
    }

    pub fn is_tensor(&self) -> bool {
        !matches!(self.data, SectionData::Text(_))
    }

    pub fn dtype(&self) -> &'static str {
        match self.data {
            SectionData::F32(_) => "f32",
            SectionData::F64(_) => "f64",
            SectionData::Text(_) => "text",
        }
    }

    pub fn numel(&self) -> usize {
        match &self.data {
            SectionData::F32(v) => v.len(),
            SectionData::F64(v) => v.len(),
            SectionData::Text(_) => 0,
        }
    }

    /// Tensor payload converted to `F`.
    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        let values: Vec<F> = match &self.data {
            SectionData::F32(v) => v.iter().map(|&x| F::of(x as f64)).collect(),
            SectionData::F64(v) => v.iter().map(|&x| F::of(x)).collect(),
            SectionData::Text(_) => {
                return Err(Error::Format(format!("section {} is not a tensor", self.name)))
            }
        };
        Tensor::new(&self.shape, values)
            .map_err(|e| Error::Format(format!("section {}: {e}", self.name)))
    }
}

/// The raw section table of a checkpoint file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CheckpointFile {
    pub sections: Vec<Section>,
}

impl CheckpointFile {
    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    fn require(&self, name: &str) -> Result<&Section> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing section {name:?}")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match &self.require(name)?.data {
            SectionData::Text(s) => Ok(s),
            _ => Err(Error::Format(format!("section {name} is not text"))),
        }
    }

    pub fn tensor<F: Real>(&self, name: &str) -> Result<Tensor<F>> {
        self.require(name)?.to_tensor()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            match &s.data {
                SectionData::Text(text) => {
                    out.push(KIND_TEXT);
                    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
                    out.extend_from_slice(text.as_bytes());
                }
                data => {
                    out.push(KIND_TENSOR);
                    out.push(if matches!(data, SectionData::F32(_)) { 4 } else { 8 });
                    out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
                    for &e in &s.shape {
                        out.extend_from_slice(&(e as u32).to_le_bytes());
                    }
                    match data {
                        SectionData::F32(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                        SectionData::F64(v) => v.iter().for_each(|x| x.write_le(&mut out)),
                        SectionData::Text(_) => unreachable!(),
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&body[4..]);
        if stored != actual {
            return Err(Error::Corrupt(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let section = match r.u8()? {
                KIND_TEXT => {
                    let len = r.u32()? as usize;
                    let text = String::from_utf8(r.take(len)?.to_vec())
                        .map_err(|_| Error::Format(format!("section {name} is not UTF-8")))?;
                    Section::text(name, text)
                }
                KIND_TENSOR => {
                    let width = r.u8()?;
                    let rank = r.u32()? as usize;
                    let mut shape = Vec::with_capacity(rank.min(16));
                    for _ in 0..rank {
                        shape.push(r.u32()? as usize);
                    }
                    let numel = shape
                        .iter()
                        .try_fold(1usize, |a, &e| a.checked_mul(e))
                        .ok_or_else(|| Error::Format(format!("section {name}: extents overflow")))?;
                    let data = match width {
                        4 => SectionData::F32(r.take(numel.saturating_mul(4))?.chunks(4).map(f32::read_le).collect()),
                        8 => SectionData::F64(r.take(numel.saturating_mul(8))?.chunks(8).map(f64::read_le).collect()),
                        w => return Err(Error::Format(format!("section {name}: scalar width {w}"))),
                    };
                    Section { name, shape, data }
                }
                k => return Err(Error::Format(format!("section {name}: unknown kind {k}"))),
            };
            sections.push(section);
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the section table",
                body.len() - r.pos
            )));
        }
        Ok(CheckpointFile { sections })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn meta(&self) -> Result<Meta> {
        Ok(serde_json::from_str(self.text("meta")?)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Scalar bookkeeping stored as JSON in the `meta` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub precision: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    #[serde(default)]
    pub stall: usize,
    #[serde(default)]
    pub stopped: bool,
    #[serde(default)]
    pub adam_step: Option<u64>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

/// A model, optionally with the optimizer and early-stopping state needed
/// to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub params: DfeParameters<F>,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<OptimizerState<F>>,
    pub best: Option<DfeParameters<F>>,
    pub best_val: f64,
    pub epoch: usize,
    pub stall: usize,
    pub stopped: bool,
    pub history: Vec<EpochRecord>,
}

impl<F: Real> Checkpoint<F> {
    /// A bare model with no training state.
    pub fn from_params(params: DfeParameters<F>) -> Self {
        Checkpoint {
            params,
            train: None,
            optimizer: None,
            best: None,
            best_val: f64::INFINITY,
            epoch: 0,
            stall: 0,
            stopped: false,
            history: Vec::new(),
        }
    }

    pub fn from_trainer(t: &Trainer<F>) -> Self {
        Checkpoint {
            params: t.params.clone(),
            train: Some(t.config.clone()),
            optimizer: Some(t.optimizer.clone()),
            best: Some(t.best.clone()),
            best_val: t.best_val,
            epoch: t.epoch,
            stall: t.stall,
            stopped: t.stopped,
            history: t.history.clone(),
        }
    }

    /// Rebuilds the trainer so that training continues exactly where it
    /// stopped.
    pub fn into_trainer(self) -> Result<Trainer<F>> {
        let config = self
            .train
            .ok_or_else(|| Error::Format("checkpoint has no training state".into()))?;
        let optimizer = self
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        Ok(Trainer {
            config,
            best: self.best.unwrap_or_else(|| self.params.clone()),
            params: self.params,
            optimizer,
            best_val: self.best_val,
            epoch: self.epoch,
            stall: self.stall,
            stopped: self.stopped,
            history: self.history,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn to_file(&self) -> CheckpointFile {
        let meta = Meta {
            precision: F::BITS,
            model: self.params.config,
            train: self.train.clone(),
            epoch: self.epoch,
            stall: self.stall,
            stopped: self.stopped,
            adam_step: self.optimizer.as_ref().map(|o| o.step),
            history: self.history.clone(),
        };
        let mut sections = vec![Section::text(
            "meta",
            serde_json::to_string(&meta).expect("meta serializes"),
        )];
        let mut push_params = |prefix: &str, p: &DfeParameters<F>| {
            for (name, t) in p.named() {
                sections.push(Section::tensor(format!("{prefix}.{name}"), t));
            }
        };
        push_params("param", &self.params);
        if let Some(best) = &self.best {
            push_params("best", best);
        }
        if let Some(opt) = &self.optimizer {
            let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
            for (name, m) in names.iter().zip(&opt.m) {
                sections.push(Section::tensor(format!("adam.m.{name}"), m));
            }
            for (name, v) in names.iter().zip(&opt.v) {
                sections.push(Section::tensor(format!("adam.v.{name}"), v));
            }
        }
        sections.push(Section::tensor("best_val", &Tensor::scalar(self.best_val)));
        CheckpointFile { sections }
    }

    /// Decodes a section table, checking every tensor against the skeleton
    /// of `expected` when given (otherwise against the stored config).
    pub fn from_file(file: &CheckpointFile, expected: Option<&ModelConfig>) -> Result<Self> {
        let meta = file.meta()?;
        if let Some(cfg) = expected {
            if *cfg != meta.model {
                return Err(Error::Skeleton(format!(
                    "checkpoint model {:?} differs from expected {cfg:?}",
                    meta.model
                )));
            }
        }
        meta.model.validate()?;
        let sk = skeleton(&meta.model);
        let read_params = |prefix: &str| -> Result<DfeParameters<F>> {
            let mut err = None;
            let p: Dfe<Tensor<F>> = sk.map_slots(&mut |name, shape| {
                match read_slot(file, &format!("{prefix}.{name}"), shape) {
                    Ok(t) => t.with_grad(),
                    Err(e) => {
                        err.get_or_insert(e);
                        Tensor::zeros(&[1])
                    }
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok(p),
            }
        };
        let params = read_params("param")?;
        let best = if file.get(&format!("best.{}", sk.named()[0].0)).is_some() {
            Some(read_params("best")?)
        } else {
            None
        };
        let optimizer = match meta.adam_step {
            Some(step) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for (name, shape) in sk.named() {
                    m.push(read_slot(file, &format!("adam.m.{name}"), shape)?);
                    v.push(read_slot(file, &format!("adam.v.{name}"), shape)?);
                }
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        let best_val = file.tensor::<f64>("best_val")?.item();
        let expected_sections = 2 + sk.named().len()
            * (1 + usize::from(best.is_some()) + 2 * usize::from(optimizer.is_some()));
        if file.sections.len() != expected_sections {
            return Err(Error::Skeleton(format!(
                "{} sections, expected {expected_sections}",
                file.sections.len()
            )));
        }
        Ok(Checkpoint {
            params,
            train: meta.train,
            optimizer,
            best,
            best_val,
            epoch: meta.epoch,
            stall: meta.stall,
            stopped: meta.stopped,
            history: meta.history,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_file().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_file(&CheckpointFile::from_bytes(bytes)?, expected)
    }
}

fn read_slot<F: Real>(file: &CheckpointFile, name: &str, shape: &[usize]) -> Result<Tensor<F>> {
    let s = file
        .get(name)
        .ok_or_else(|| Error::Skeleton(format!("missing tensor {name}")))?;
    if s.shape != shape {
        return Err(Error::Skeleton(format!(
            "{name} has shape {:?}, expected {shape:?}",
            s.shape
        )));
    }
    s.to_tensor()
}

pub fn save_checkpoint<F: Real>(ckpt: &Checkpoint<F>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&std::fs::read(path)?, None)
}

/// Loads and verifies every tensor against the skeleton of `expected`.
pub fn load_checkpoint_checked<F: Real>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&std::fs::read(path)?, Some(expected))
}

/// What `inspect` reports about a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub version: u32,
    pub precision: u32,
    pub model: ModelConfig,
    pub epoch: usize,
    pub sections: Vec<(String, String, Vec<usize>)>,
    pub param_count: usize,
    pub tau: f64,
    pub best_val: f64,
}

pub fn summarize(file: &CheckpointFile) -> Result<CheckpointSummary> {
    let meta = file.meta()?;
    let param_count = file
        .sections
        .iter()
        .filter(|s| s.name.starts_with("param.") && s.is_tensor())
        .map(Section::numel)
        .sum();
    let tau = file.tensor::<f64>("param.log_tau")?.item().exp();
    let best_val = file.tensor::<f64>("best_val")?.item();
    Ok(CheckpointSummary {
        version: CHECKPOINT_VERSION,
        precision: meta.precision,
        model: meta.model,
        epoch: meta.epoch,
        sections: file
            .sections
            .iter()
            .map(|s| (s.name.clone(), s.dtype().to_string(), s.shape.clone()))
            .collect(),
        param_count,
        tau,
        best_val,
    })
}
