//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "DTLS" | version: u32 | tensor count: u64
//! per tensor: name length: u64 | UTF-8 name | rank: u64 | dims: u64 × rank | data: f64 × numel
//! step: u64 | config length: u64 | config JSON
//! ```

use std::path::Path;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};
use crate::transformer::DtLsd;

pub const MAGIC: [u8; 4] = *b"DTLS";
pub const VERSION: u32 = 1;

/// Named parameter tensors, the configuration that built them, and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config: TrainConfig,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: &TrainConfig, step: u64) -> Self {
        Self {
            tensors: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.value(id).clone()))
                .collect(),
            config: config.clone(),
            step,
        }
    }

    /// Copies the tensors into `store` by name; every parameter must be present with its shape.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model has {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no parameter {name}")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the model from the stored configuration and loads the weights.
    pub fn build_model(&self) -> Result<(DtLsd, ParamStore)> {
        let (model, mut store) = DtLsd::new(self.config.model.clone(), self.config.seed)?;
        self.apply_to(&mut store)?;
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u64(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.rank());
            for &d in t.shape() {
                put_u64(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        put_u64(&mut out, cfg.len());
        out.extend_from_slice(&cfg);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("four bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.len("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.len("name length")?;
            let name = String::from_utf8(r.take(n, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.len("rank")?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.len("dims")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8).map(|_| n))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dimensions {shape:?} overflow")))?;
            let raw = r.take(numel * 8, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        let step = r.u64("step")?;
        let n = r.len("config length")?;
        let config: TrainConfig = serde_json::from_slice(r.take(n, "config")?)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, config, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Saves and reloads a checkpoint through `path`.
pub fn checkpoint_roundtrip(ckpt: &Checkpoint, path: &Path) -> Result<Checkpoint> {
    ckpt.save(path)?;
    Checkpoint::load(path)
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated { what }),
        }
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in memory")))
    }
}
