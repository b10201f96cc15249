//! Checkpoint container: `"FSCK"`, `u16` version, `u8` stage, a
//! length-prefixed JSON metadata block, then length-prefixed
//! `(name, shape, f32 data)` records, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"FSCK";
pub const CKPT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// Training method names; method class `k + 1` is `methods[k]`.
    pub methods: Vec<String>,
    /// All sampling streams derive from `(config.seed, step, epoch)`.
    pub step: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(stage: u8, meta: CheckpointMeta, store: &ParamStore) -> Self {
        Checkpoint {
            stage,
            meta,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Overwrite every parameter of `store`; names and shapes must match
    /// exactly in both directions.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Incompatible(format!("model has no parameter {name}")))?;
            if store.get(id).value.shape() != value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name}: checkpoint shape {:?}, model {:?}",
                    value.shape(),
                    store.get(id).value.shape()
                )));
            }
        }
        for (name, value) in &self.params {
            let id = store.find(name).unwrap();
            store.get_mut(id).value = value.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(self.stage);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CKPT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Incompatible(format!(
                "{}: checkpoint version {version}, expected {CKPT_VERSION}",
                path.display()
            )));
        }
        let stage = r.take(1)?[0];
        if !(1..=2).contains(&stage) {
            return Err(r.err(format!("invalid stage {stage}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.err(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(4).ok_or_else(|| r.err("shape overflow"))?)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            params.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { stage, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_stage(&self, stage: u8) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Incompatible(format!(
                "expected a stage-{stage} checkpoint, found stage {}",
                self.stage
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
