//! Single-file binary checkpoints.
//!
//! Layout (little-endian): magic `FLOWCKPT`, `u32` version, `u8` dtype tag,
//! length-prefixed JSON metadata, `u64` step, RNG section (`u64` seed,
//! `u64` counter), `u32` parameter count followed by one record per
//! parameter (`u32` name length, name, `u32` rank, `u64` dims, payload),
//! then the optimizer section (`u64` update count, first-moment payloads,
//! second-moment payloads, in parameter order).

use std::path::Path;

use flowct_tensor::{DType, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowPathConfig;
use crate::net::{Params, VelocityNetConfig};
use crate::prep::{Modality, NormalizationSpec};
use crate::train::OptimizerState;

const MAGIC: &[u8; 8] = b"FLOWCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild the model and its preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: VelocityNetConfig,
    pub flow: FlowPathConfig,
    pub modality: Modality,
    pub normalization: NormalizationSpec,
}

/// Training randomness is counter-based, so `(seed, counter)` is the whole
/// generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub rng: RngState,
    pub params: Params<T>,
    pub optimizer: OptimizerState<T>,
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(dtype_tag(T::DTYPE));
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_u32(&mut out, meta.len());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.counter.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.names.iter().zip(&self.params.tensors) {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for buf in self.optimizer.m.iter().chain(&self.optimizer.v) {
            out.extend_from_slice(&T::to_le_bytes_vec(buf.data()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        if tag != dtype_tag(T::DTYPE) {
            return Err(Error::Checkpoint(format!(
                "stored dtype tag {tag} does not match requested {}",
                T::DTYPE.name()
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            counter: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut params = Params {
            names: Vec::with_capacity(count),
            tensors: Vec::with_capacity(count),
        };
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let t = r.tensor::<T>(shape)?;
            params.names.push(name);
            params.tensors.push(t);
        }
        let opt_step = r.u64()?;
        let mut moments = Vec::with_capacity(2 * count);
        for i in 0..2 * count {
            moments.push(r.tensor::<T>(params.tensors[i % count].shape().to_vec())?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let v = moments.split_off(count);
        Ok(Self {
            meta,
            step,
            rng,
            params,
            optimizer: OptimizerState {
                m: moments,
                v,
                step: opt_step,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n
            .and_then(|n| n.checked_mul(T::DTYPE.size()))
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?}")))?;
        let data = T::from_le_bytes_slice(self.take(bytes)?);
        Ok(Tensor::from_vec(shape, data)?)
    }
}
