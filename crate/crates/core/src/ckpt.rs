//! Binary model checkpoints: a JSON copy of the architecture config followed
//! by a sorted, named parameter table. Self-describing — decoding never needs
//! the original config file — and load-then-save is byte-identical.
//!
//! Layout, all integers little-endian:
//! `"CKPT0001"` magic, u32 format version, u32 config length, config JSON,
//! u32 parameter count, then per parameter (sorted by name): u32 name length,
//! UTF-8 name, u32 rank, u32 dims, f32 payload in row-major order.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VsrModel};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"CKPT0001";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl ModelCheckpoint {
    /// Snapshot a model's weights under their visitation names.
    pub fn from_model(model: &VsrModel) -> Self {
        let mut params = BTreeMap::new();
        model.visit(&mut |name, t| {
            params.insert(name.to_string(), t.clone());
        });
        ModelCheckpoint {
            version: CKPT_VERSION,
            config: model.config.clone(),
            params,
        }
    }

    /// Rebuild a model, failing if the parameter table and the config
    /// disagree on the set of names or any shape.
    pub fn into_model(self, seed: u64) -> Result<VsrModel> {
        let mut model = VsrModel::init(self.config.clone(), seed)?;
        let expected: Vec<String> = model.param_names();
        let stored: Vec<String> = self.params.keys().cloned().collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        if expected_sorted != stored {
            let missing: Vec<&String> = expected_sorted.iter().filter(|n| !self.params.contains_key(*n)).collect();
            let extra: Vec<&String> = stored.iter().filter(|n| !expected.contains(n)).collect();
            return Err(Error::Data(format!(
                "checkpoint/config mismatch: missing params {missing:?}, unexpected {extra:?}"
            )));
        }
        let params = self.params;
        let mut shape_err = None;
        model.visit_mut(&mut |name, t| {
            let stored = &params[name];
            if stored.shape() != t.shape() {
                shape_err.get_or_insert(format!(
                    "parameter {name}: stored shape {:?} != expected {:?}",
                    stored.shape(),
                    t.shape()
                ));
            } else {
                *t = stored.clone();
            }
        });
        if let Some(msg) = shape_err {
            return Err(Error::Data(msg));
        }
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        let config_json = serde_json::to_string(&self.config)
            .map_err(|e| Error::Data(format!("checkpoint: cannot serialize config: {e}")))?;
        w.write_all(&(config_json.len() as u32).to_le_bytes())?;
        w.write_all(config_json.as_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Data("checkpoint: bad magic (file too short)".to_string()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Data("checkpoint: bad magic".to_string()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Data(format!("checkpoint: unsupported version {version}")));
        }
        let config_len = read_u32(&mut r)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes)
            .map_err(|_| Error::Data("checkpoint: truncated config".to_string()))?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| Error::Data(format!("checkpoint: invalid config JSON: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::Data("checkpoint: truncated name".to_string()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Data("checkpoint: parameter name is not UTF-8".to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Data(format!("checkpoint: unreasonable rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1u64;
            for _ in 0..rank {
                let d = read_u32(&mut r)? as u64;
                numel = numel.saturating_mul(d);
                if numel > (1 << 30) {
                    return Err(Error::Data("checkpoint: dimension overflow".to_string()));
                }
                shape.push(d as usize);
            }
            let mut data = vec![0f32; numel as usize];
            let mut buf = [0u8; 4];
            for slot in data.iter_mut() {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Data("checkpoint: truncated payload".to_string()))?;
                *slot = f32::from_le_bytes(buf);
            }
            if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Data(format!("checkpoint: duplicate parameter {name}")));
            }
        }
        Ok(ModelCheckpoint {
            version,
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::read_from(&bytes[..])
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Save a model straight to disk.
pub fn save_model(model: &VsrModel, path: &Path) -> Result<()> {
    ModelCheckpoint::from_model(model).save(path)
}

/// Load a model straight from disk.
pub fn load_model(path: &Path) -> Result<VsrModel> {
    ModelCheckpoint::load(path)?.into_model(0)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data("checkpoint: truncated header".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::toy_model_config;

    #[test]
    fn roundtrip_restores_every_parameter() {
        let model = VsrModel::init(toy_model_config(), 42).unwrap();
        let ckpt = ModelCheckpoint::from_model(&model);
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = ModelCheckpoint::read_from(&bytes[..]).unwrap();
        let restored = back.into_model(0).unwrap();
        let mut equal = true;
        model.visit(&mut |name, t| {
            restored.visit(&mut |n2, t2| {
                if n2 == name && t2 != t {
                    equal = false;
                }
            });
        });
        assert!(equal);
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let model = VsrModel::init(toy_model_config(), 43).unwrap();
        let ckpt = ModelCheckpoint::from_model(&model);
        let mut first = Vec::new();
        ckpt.write_to(&mut first).unwrap();
        let reloaded = ModelCheckpoint::read_from(&first[..]).unwrap();
        let mut second = Vec::new();
        reloaded.write_to(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn bad_magic_and_missing_params_are_rejected() {
        assert!(ModelCheckpoint::read_from(&b"NOTCKPT!rest"[..]).is_err());
        let model = VsrModel::init(toy_model_config(), 44).unwrap();
        let mut ckpt = ModelCheckpoint::from_model(&model);
        ckpt.params.remove("ctc_head.w");
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let err = ModelCheckpoint::read_from(&bytes[..]).unwrap().into_model(0).unwrap_err();
        assert!(err.to_string().contains("ctc_head.w"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = VsrModel::init(toy_model_config(), 45).unwrap();
        let mut ckpt = ModelCheckpoint::from_model(&model);
        ckpt.params.insert("ctc_head.b".to_string(), Tensor::zeros(&[3]));
        let err = ckpt.into_model(0).unwrap_err();
        assert!(err.to_string().contains("ctc_head.b"), "{err}");
    }
}
