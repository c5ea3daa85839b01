//! Versioned binary checkpoint container.
//!
//! ```text
//! magic        8 bytes  "SMFCKPT\0"
//! version      u32 LE
//! meta_len     u64 LE
//! meta         UTF-8 TOML (config echo and loop state)
//! n_entries    u32 LE
//! entry*       name_len u32, name, ndim u32, dims u64*, data f64 LE*
//! ```
//!
//! Entries are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`. Values
//! are stored bit-exactly, so a reloaded model reproduces forward outputs
//! bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, ParamStore};
use super::tensor::Tensor;
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::mape::{EmbeddingVariant, MapeConfig};

pub const MAGIC: &[u8; 8] = b"SMFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LoopState {
    epoch: usize,
    step: usize,
    total_steps: usize,
    adam_step: u64,
    /// Shuffling is drawn from a ChaCha8 stream keyed by (seed, epoch), so the
    /// seed and epoch fully determine the RNG position.
    rng: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    variant: EmbeddingVariant,
    model: ModelConfig,
    mape: MapeConfig,
    train: TrainConfig,
    state: LoopState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let meta = Meta {
        variant: t.model.variant,
        model: t.model.config,
        mape: t.model.mape,
        train: t.config,
        state: LoopState {
            epoch: t.epoch,
            step: t.step,
            total_steps: t.total_steps,
            adam_step: t.optimizer.step,
            rng: format!("chacha8 seed={} stream={}", t.config.seed, t.epoch),
        },
    };
    let meta = toml::to_string(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u64(&mut out, meta.len() as u64);
    out.extend_from_slice(meta.as_bytes());
    let n = t.model.params.len() + t.optimizer.m.len() + t.optimizer.v.len();
    put_u32(&mut out, n as u32);
    for (name, p) in t.model.params.iter() {
        put_entry(&mut out, &format!("param/{name}"), p.shape(), p.data());
    }
    for (prefix, map) in [("adam.m", &t.optimizer.m), ("adam.v", &t.optimizer.v)] {
        for (name, v) in map {
            put_entry(&mut out, &format!("{prefix}/{name}"), &[v.len()], v);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = r.u64()? as usize;
    let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta: Meta = toml::from_str(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u32()?;
    let mut params = ParamStore::default();
    let mut opt = meta.train.optimizer();
    opt.step = meta.state.adam_step;
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("entry too large".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match name.split_once('/') {
            Some(("param", p)) => params.insert(p, Tensor::new(&shape, data)?),
            Some(("adam.m", p)) => {
                opt.m.insert(p.to_string(), data);
            }
            Some(("adam.v", p)) => {
                opt.v.insert(p.to_string(), data);
            }
            _ => return Err(Error::Checkpoint(format!("unknown entry {name}"))),
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last entry".into()));
    }
    let reference = Model::init(meta.model, meta.mape, meta.variant, 0)?;
    let expected: BTreeMap<&String, &[usize]> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
    let actual: BTreeMap<&String, &[usize]> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != actual {
        return Err(Error::Checkpoint("parameter set does not match the recorded config".into()));
    }
    Ok(Trainer {
        model: Model {
            config: meta.model,
            mape: meta.mape,
            variant: meta.variant,
            params,
        },
        optimizer: opt,
        config: meta.train,
        epoch: meta.state.epoch,
        step: meta.state.step,
        total_steps: meta.state.total_steps,
    })
}

pub fn save(t: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(t)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// Hex SHA-256 of the checkpoint file, logged by evaluation runs.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    use sha2::{Digest, Sha256};
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&buf)))
}
