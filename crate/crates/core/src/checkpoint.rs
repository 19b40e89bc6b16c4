//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` schema version, `u64` manifest length, a JSON
//! manifest (kind, config, metadata, tensor names and shapes), the tensors as
//! little-endian `f64` in manifest order, and a trailing FNV-1a checksum over
//! everything before it. Writes go to a temporary file that is renamed into
//! place.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeeConfig, HeeModel, PooledModel};
use crate::nn::{Mat, ParamStore};

const MAGIC: &[u8; 8] = b"HEECKPT\0";
pub const SCHEMA_VERSION: u32 = 1;

pub const KIND_HEE: &str = "hee";
pub const KIND_POOLED: &str = "pooled";
pub const KIND_TRAIN_STATE: &str = "train-state";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the model configuration they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize, params: ParamStore) -> Result<Self> {
        Ok(Self { kind: kind.into(), config: serde_json::to_value(config)?, meta: serde_json::Value::Null, params })
    }

    /// Inference checkpoint: the classification head is dropped.
    pub fn from_hee(model: &HeeModel) -> Result<Self> {
        Self::new(KIND_HEE, model.config(), model.strip_head().params().clone())
    }

    pub fn from_pooled(model: &PooledModel) -> Result<Self> {
        Self::new(KIND_POOLED, model.config(), model.strip_head().params().clone())
    }

    pub fn hee_config(&self) -> Result<HeeConfig> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn into_hee(self) -> Result<HeeModel> {
        self.expect_kind(KIND_HEE)?;
        HeeModel::from_store(self.hee_config()?, &self.params)
    }

    pub fn into_pooled(self) -> Result<PooledModel> {
        self.expect_kind(KIND_POOLED)?;
        PooledModel::from_store(self.hee_config()?, &self.params)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self.params.iter().map(|(n, m)| TensorEntry { name: n.into(), shape: [m.nrows(), m.ncols()] }).collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.scalar_count() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in self.params.iter() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 28 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(corrupt("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("schema version {version}, expected {SCHEMA_VERSION}")));
        }
        let len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20 + len).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let mut data = &body[20 + len..];
        let mut params = ParamStore::new();
        for t in &manifest.tensors {
            let n = t.shape[0] * t.shape[1];
            if data.len() < 8 * n {
                return Err(corrupt("truncated tensor data"));
            }
            let values: Vec<f64> =
                data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            data = &data[8 * n..];
            let m = Mat::from_shape_vec((t.shape[0], t.shape[1]), values).map_err(|e| corrupt(&e.to_string()))?;
            if params.id(&t.name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
            params.add(t.name.clone(), m);
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes after tensor data"));
        }
        Ok(Self { kind: manifest.kind, config: manifest.config, meta: manifest.meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HeeConfig {
        HeeConfig { n_mels: 8, channels: 8, d_model: 8, n_enhancer_blocks: 1, n_heads: 2, n_classes: 3, ..Default::default() }
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let model = HeeModel::new(tiny(), true, true, 3).unwrap();
        let ck = Checkpoint::from_hee(&model).unwrap();
        assert!(ck.params.iter().all(|(n, _)| !n.starts_with("head.")));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.into_hee().unwrap();
        assert!(restored.has_enhancer() && !restored.has_head());
    }

    #[test]
    fn corruption_and_version_mismatch_are_rejected() {
        let ck = Checkpoint::from_pooled(&PooledModel::new(tiny(), false, 1).unwrap()).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        let n = versioned.len() - 8;
        let sum = fnv1a(&versioned[..n]);
        versioned[n..].copy_from_slice(&sum.to_le_bytes());
        let err = Checkpoint::from_bytes(&versioned).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn wrong_kind_or_shape_is_an_error() {
        let ck = Checkpoint::from_pooled(&PooledModel::new(tiny(), false, 1).unwrap()).unwrap();
        assert!(ck.clone().into_hee().is_err());
        let mut bad = ck;
        bad.config = serde_json::to_value(HeeConfig { channels: 16, ..tiny() }).unwrap();
        assert!(bad.into_pooled().is_err());
    }
}
