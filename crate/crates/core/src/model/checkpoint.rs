//! Binary checkpoint files, little-endian throughout:
//!
//! ```text
//! "ZSDK"  u32 version  u32 meta_len  meta (JSON, meta_len bytes)
//! u32 count, then per parameter in name order:
//!   u32 name_len  name  u32 ndim  u32 dims[ndim]  f32 values[prod(dims)]
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: [u8; 4] = *b"ZSDK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub d_emb: usize,
    pub seed: u64,
    pub stage: String,
    pub param_count: usize,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");
        let mut out = Vec::with_capacity(16 + meta.len() + self.params.num_values() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(ModelError::BadMagic { found: magic });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32("parameter name length")? as usize;
            let name = String::from_utf8_lossy(r.take(n, "parameter name")?).into_owned();
            let ndim = r.u32("parameter rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32("parameter shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let bytes = shape
                .iter()
                .try_fold(4usize, |a, &d| a.checked_mul(d))
                .ok_or(ModelError::Truncated("parameter values"))?;
            let raw = r.take(bytes, "parameter values")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(ModelError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Checks `params` against the expected names and shapes exactly.
pub(super) fn match_params(
    params: &ParamStore,
    expected: &[(String, Vec<usize>)],
) -> Result<ParamStore> {
    for name in params.names() {
        if !expected.iter().any(|(n, _)| n == name) {
            return Err(ModelError::UnknownParam(name.clone()));
        }
    }
    let mut out = ParamStore::new();
    for (name, shape) in expected {
        let t = params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(ModelError::ParamShape {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
        out.insert(name.clone(), t.clone());
    }
    Ok(out)
}
