//! `FFCK1` checkpoints.
//!
//! Layout, all integers little-endian:
//! `FFCK1`, version byte, `u32` descriptor length + JSON descriptor,
//! `u32` record count, then per record `u32` name length + UTF-8 name,
//! `u32` rank, `rank` x `u32` dims, `f32` values; finally `u32` blob length
//! and the RNG blob (32-byte ChaCha seed, `u64` stream, `u128` word position).
//! Optimizer moments are stored as records named `adamw.m.<param>` and
//! `adamw.v.<param>`.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamWConfig, LrSchedule, OptimizerState, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"FFCK1";
pub const CHECKPOINT_VERSION: u8 = 1;
const RNG_BLOB_LEN: usize = 56;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub lr: f64,
    pub config: AdamWConfig,
}

/// JSON part of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDescriptor {
    pub spec: ModelSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epoch: u64,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub schedule: Option<LrSchedule>,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: CheckpointDescriptor,
    /// Parameters in store order.
    pub params: Vec<(String, Tensor)>,
    pub first_moment: Option<Vec<Vec<f64>>>,
    pub second_moment: Option<Vec<Vec<f64>>>,
    pub rng: Option<ChaCha8Rng>,
}

fn rng_to_blob(rng: &ChaCha8Rng) -> [u8; RNG_BLOB_LEN] {
    let mut b = [0u8; RNG_BLOB_LEN];
    b[..32].copy_from_slice(&rng.get_seed());
    b[32..40].copy_from_slice(&rng.get_stream().to_le_bytes());
    b[40..].copy_from_slice(&rng.get_word_pos().to_le_bytes());
    b
}

fn rng_from_blob(b: &[u8]) -> ChaCha8Rng {
    use rand::SeedableRng;
    let seed: [u8; 32] = b[..32].try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(b[32..40].try_into().expect("8 bytes")));
    rng.set_word_pos(u128::from_le_bytes(b[40..56].try_into().expect("16 bytes")));
    rng
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len());
    for &d in shape {
        put_u32(buf, d);
    }
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n).ok_or_else(|| Error::Format {
            offset: self.at as u64,
            detail: format!("truncated {what}"),
        })?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    /// Weights only.
    pub fn from_model(model: &Model) -> Self {
        Self {
            descriptor: CheckpointDescriptor {
                spec: model.spec.clone(),
                seed: 0,
                epoch: 0,
                step: 0,
                schedule: None,
                optimizer: None,
            },
            params: model
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("shape")))
                .collect(),
            first_moment: None,
            second_moment: None,
            rng: None,
        }
    }

    pub fn with_optimizer(mut self, opt: &OptimizerState) -> Self {
        self.descriptor.optimizer = Some(OptimizerMeta {
            step: opt.step,
            lr: opt.lr,
            config: opt.config,
        });
        self.first_moment = Some(opt.first_moment.clone());
        self.second_moment = Some(opt.second_moment.clone());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.push(CHECKPOINT_VERSION);
        let json = serde_json::to_vec(&self.descriptor)?;
        put_u32(&mut buf, json.len());
        buf.extend_from_slice(&json);
        let moments = match (&self.first_moment, &self.second_moment) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        };
        let n_records = self.params.len() * if moments.is_some() { 3 } else { 1 };
        put_u32(&mut buf, n_records);
        for (name, t) in &self.params {
            put_record(&mut buf, name, t.shape(), t.data());
        }
        if let Some((m, v)) = moments {
            for (prefix, mom) in [("adamw.m.", m), ("adamw.v.", v)] {
                for ((name, t), vals) in self.params.iter().zip(mom) {
                    put_record(&mut buf, &format!("{prefix}{name}"), t.shape(), vals);
                }
            }
        }
        match &self.rng {
            Some(r) => {
                put_u32(&mut buf, RNG_BLOB_LEN);
                buf.extend_from_slice(&rng_to_blob(r));
            }
            None => put_u32(&mut buf, 0),
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(5, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad magic, expected FFCK1".into(),
            });
        }
        let version = r.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 5,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let jl = r.u32("descriptor length")?;
        let at = r.at;
        let descriptor: CheckpointDescriptor =
            serde_json::from_slice(r.take(jl, "descriptor")?).map_err(|e| Error::Format {
                offset: at as u64,
                detail: format!("bad descriptor: {e}"),
            })?;
        let n = r.u32("record count")?;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let start = r.at;
            let nl = r.u32("record name length")?;
            let name = std::str::from_utf8(r.take(nl, "record name")?)
                .map_err(|_| Error::Format {
                    offset: start as u64,
                    detail: "record name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "values")?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if let Some(p) = name.strip_prefix("adamw.m.") {
                m.push((p.to_string(), values));
            } else if let Some(p) = name.strip_prefix("adamw.v.") {
                v.push((p.to_string(), values));
            } else {
                let t = Tensor::new(shape, values).map_err(|e| Error::Format {
                    offset: start as u64,
                    detail: format!("record {name}: {e}"),
                })?;
                params.push((name, t));
            }
        }
        let bl = r.u32("rng blob length")?;
        let rng = match bl {
            0 => None,
            RNG_BLOB_LEN => Some(rng_from_blob(r.take(bl, "rng blob")?)),
            other => {
                return Err(Error::Format {
                    offset: (r.at - 4) as u64,
                    detail: format!("rng blob of {other} bytes, expected {RNG_BLOB_LEN}"),
                })
            }
        };
        if r.at != bytes.len() {
            return Err(Error::Format {
                offset: r.at as u64,
                detail: format!("{} trailing bytes", bytes.len() - r.at),
            });
        }
        let order = |mom: Vec<(String, Vec<f64>)>| -> Result<Option<Vec<Vec<f64>>>> {
            if mom.is_empty() {
                return Ok(None);
            }
            if mom.len() != params.len() || mom.iter().zip(&params).any(|((a, _), (b, _))| a != b) {
                return Err(Error::Format {
                    offset: 0,
                    detail: "optimizer records do not match the parameters".into(),
                });
            }
            Ok(Some(mom.into_iter().map(|(_, v)| v).collect()))
        };
        Ok(Self {
            descriptor,
            first_moment: order(m)?,
            second_moment: order(v)?,
            params,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::seeded(self.descriptor.spec.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "checkpoint has {} parameters, the described model has {}",
                    self.params.len(),
                    model.store.len()
                ),
            });
        }
        for (name, t) in &self.params {
            model.store.set_value(name, t.data(), t.shape())?;
        }
        Ok(model)
    }

    /// Optimizer state, when the checkpoint carries one.
    pub fn optimizer(&self) -> Option<OptimizerState> {
        let meta = self.descriptor.optimizer.as_ref()?;
        Some(OptimizerState {
            step: meta.step,
            first_moment: self.first_moment.clone()?,
            second_moment: self.second_moment.clone()?,
            lr: meta.lr,
            config: meta.config,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
