//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "POARCKPT" u32 version
//! str config digest, str catalog hash, u64 step
//! str config (JSON), str catalog (JSONL), str holdout (JSON array)
//! u32 section count, then per section: str name, u32 rank, u64 dims…, f64 values…
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::catalog::{AttributeCatalog, CatalogError};
use crate::config::TrainConfig;
use crate::model::PoarModel;
use crate::tensor::Tensor;
use crate::vision::VisionError;

pub const MAGIC: &[u8; 8] = b"POARCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Training catalog with its held-out attributes.
    pub catalog: AttributeCatalog,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &PoarModel, config: &TrainConfig, catalog: &AttributeCatalog, step: u64) -> Self {
        Self {
            config: *config,
            catalog: catalog.clone(),
            step,
            params: model
                .store
                .names()
                .iter()
                .cloned()
                .zip(model.store.tensors().iter().cloned())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config.digest());
        put_str(&mut out, &self.catalog.hash());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.config).expect("config serializes"));
        put_str(&mut out, &self.catalog.to_jsonl());
        put_str(&mut out, &serde_json::to_string(&self.catalog.holdout_labels()).expect("labels serialize"));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Compatibility(format!("version {version}, expected {VERSION}")));
        }
        let digest = r.string()?;
        let catalog_hash = r.string()?;
        let step = r.u64()?;
        let config: TrainConfig =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Format(format!("config: {e}")))?;
        if config.digest() != digest {
            return Err(CheckpointError::Format("config digest does not match its contents".into()));
        }
        let catalog = AttributeCatalog::parse(&r.string()?)?;
        if catalog.hash() != catalog_hash {
            return Err(CheckpointError::Format("catalog hash does not match its contents".into()));
        }
        let holdout: Vec<String> =
            serde_json::from_str(&r.string()?).map_err(|e| CheckpointError::Format(format!("holdout: {e}")))?;
        let catalog = catalog.with_holdout_labels(&holdout)?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| CheckpointError::Format("huge tensor".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self {
            config,
            catalog,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Errors unless `catalog` has the same groups as the training catalog.
    pub fn check_catalog(&self, catalog: &AttributeCatalog) -> Result<(), CheckpointError> {
        if catalog.hash() != self.catalog.hash() {
            return Err(CheckpointError::Compatibility(format!(
                "catalog hash {} differs from the checkpoint's {}",
                &catalog.hash()[..12],
                &self.catalog.hash()[..12]
            )));
        }
        Ok(())
    }

    /// Rebuilds the model and installs the stored parameters, which must
    /// match the architecture implied by the stored config by name and shape.
    pub fn to_model(&self) -> Result<PoarModel, CheckpointError> {
        let mut model = PoarModel::new(self.config.model, &self.catalog, self.config.seed)?;
        if model.store.len() != self.params.len() {
            return Err(CheckpointError::Compatibility(format!(
                "{} parameter tensors, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| CheckpointError::Compatibility(format!("unknown parameter `{name}`")))?;
            if model.store.get(id).shape() != t.shape() {
                return Err(CheckpointError::Compatibility(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(id).shape()
                )));
            }
            model.store.set(id, t.clone());
        }
        Ok(model)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format("invalid UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{peta_catalog, synthetic_catalog};
    use crate::image::Image;

    fn checkpoint() -> (PoarModel, Checkpoint) {
        let cat = synthetic_catalog().with_holdout_labels(&["Hair:white"]).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.model.paragraph_len = 64;
        let model = PoarModel::new(cfg.model, &cat, 9).unwrap();
        let ck = Checkpoint::from_model(&model, &cfg, &cat, 17);
        (model, ck)
    }

    #[test]
    fn round_trip_reproduces_embeddings() {
        let (model, ck) = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        let restored = back.to_model().unwrap();
        let img = Image::filled(32, 32, [0.3, 0.6, 0.1]);
        assert_eq!(model.image_embedding(&img).unwrap(), restored.image_embedding(&img).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (_, ck) = checkpoint();
        let bytes = ck.to_bytes();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Format(_))));
        }
    }

    #[test]
    fn different_catalog_is_incompatible() {
        let (_, ck) = checkpoint();
        assert!(ck.check_catalog(&synthetic_catalog()).is_ok());
        assert!(matches!(ck.check_catalog(&peta_catalog()), Err(CheckpointError::Compatibility(_))));
    }

    #[test]
    fn mismatched_parameters_are_refused() {
        let (_, mut ck) = checkpoint();
        ck.params[0].1 = Tensor::zeros(&[1, 1]);
        assert!(matches!(ck.to_model(), Err(CheckpointError::Compatibility(_))));
        let (_, mut ck) = checkpoint();
        ck.params.pop();
        assert!(matches!(ck.to_model(), Err(CheckpointError::Compatibility(_))));
    }
}
