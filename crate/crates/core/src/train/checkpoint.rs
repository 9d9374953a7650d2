//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//! `HAIR`, version, config length, UTF-8 config block (`key=value` lines),
//! then one record per tensor: name length, name, rank, dims, `f32` data.
//! Optimiser moments follow the parameters as `adam.m/<name>` and
//! `adam.v/<name>`.

use std::collections::HashMap;
use std::path::Path;

use crate::config::{model_entries, model_from_entries};
use crate::error::{Error, Result};
use crate::hair::{HairModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::optim::OptimState;

pub const MAGIC: &[u8; 4] = b"HAIR";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub optim: Option<OptimState<f32>>,
    /// Training seed; with `step` it fixes every later random draw.
    pub seed: u64,
    /// Optimisation steps taken.
    pub step: u64,
}

impl Checkpoint {
    pub fn from_model(model: &HairModel<f32>, optim: Option<OptimState<f32>>, seed: u64, step: u64) -> Self {
        Self {
            model: model.config().clone(),
            params: model.store().clone(),
            optim,
            seed,
            step,
        }
    }

    /// Rebuilds the network described by the checkpoint.
    pub fn to_model(&self) -> Result<HairModel<f32>> {
        HairModel::from_store(self.model.clone(), self.params.clone())
    }

    /// Loads the parameters into a network of the expected configuration;
    /// the first tensor that does not fit is named in the error.
    pub fn to_model_as(&self, expected: &ModelConfig) -> Result<HairModel<f32>> {
        HairModel::from_store(expected.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let records = self.params.len() * if self.optim.is_some() { 3 } else { 1 };
        let mut text = String::new();
        for (k, v) in model_entries(&self.model) {
            text.push_str(&format!("{k}={v}\n"));
        }
        text.push_str(&format!("state.seed={}\nstate.step={}\n", self.seed, self.step));
        if let Some(o) = &self.optim {
            text.push_str(&format!("state.optim_step={}\n", o.step));
        }
        text.push_str(&format!("state.records={records}\n"));

        let mut out = Vec::with_capacity(16 + text.len() + 4 * self.params.numel() * 3);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t);
        }
        if let Some(o) = &self.optim {
            for (prefix, moments) in [(MOMENT_M, &o.m), (MOMENT_V, &o.v)] {
                for (name, t) in self.params.names().zip(moments) {
                    put_record(&mut out, &format!("{prefix}{name}"), t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("missing HAIR magic bytes"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("config block is not UTF-8"))?;
        let mut keys = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad config line {line:?}")))?;
            keys.insert(k.trim().to_string(), v.trim().to_string());
        }
        let model = model_from_entries(|k| keys.get(k).cloned()).map_err(|e| corrupt(format!("config block: {e}")))?;
        let number = |k: &str| -> Result<u64> {
            keys.get(k)
                .ok_or_else(|| corrupt(format!("config block lacks {k}")))?
                .parse()
                .map_err(|_| corrupt(format!("bad value for {k}")))
        };
        let (seed, step, records) = (number("state.seed")?, number("state.step")?, number("state.records")?);
        let optim_step = keys.contains_key("state.optim_step").then(|| number("state.optim_step")).transpose()?;

        let mut all = ParamStore::new();
        for i in 0..records {
            if r.remaining() == 0 {
                return Err(corrupt(format!("truncated after {i} of {records} tensors")));
            }
            let (name, t) = r.record()?;
            all.insert(name, t).map_err(|e| corrupt(e.to_string()))?;
        }
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }

        let mut params = ParamStore::new();
        let mut moments: HashMap<String, Tensor<f32>> = HashMap::new();
        for (name, t) in all.iter() {
            if name.starts_with(MOMENT_M) || name.starts_with(MOMENT_V) {
                moments.insert(name.to_string(), t.clone());
            } else {
                params.insert(name, t.clone())?;
            }
        }
        let optim = match optim_step {
            None if moments.is_empty() => None,
            None => return Err(corrupt("optimiser moments without optimiser state")),
            Some(step) => {
                let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                    params
                        .iter()
                        .map(|(name, p)| {
                            let key = format!("{prefix}{name}");
                            let t = moments.remove(&key).ok_or_else(|| Error::MissingTensor(key.clone()))?;
                            if t.shape() != p.shape() {
                                return Err(Error::CheckpointShape {
                                    name: key,
                                    found: t.shape().to_vec(),
                                    expected: p.shape().to_vec(),
                                });
                            }
                            Ok(t)
                        })
                        .collect()
                };
                let m = take(MOMENT_M)?;
                let v = take(MOMENT_V)?;
                if let Some(extra) = moments.keys().min() {
                    return Err(corrupt(format!("moment {extra} has no parameter")));
                }
                Some(OptimState { m, v, step })
            }
        };
        Ok(Self {
            model,
            params,
            optim,
            seed,
            step,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks it against the network its config describes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    ckpt.to_model()?;
    Ok(ckpt)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(corrupt(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.remaining()))
            .ok_or_else(|| corrupt(format!("{name}: data for shape {shape:?} exceeds the file")))?;
        let data = self
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        Ok((name, t))
    }
}
