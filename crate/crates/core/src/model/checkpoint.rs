//! Checkpoint container.
//!
//! ```text
//! magic   "TBCKPT01"                 8 bytes
//! hlen    u64 little endian
//! header  JSON, hlen bytes           version, stage, step, epoch, seed, config, array table
//! data    f64 little endian          arrays in table order, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::mae::MaeModel;
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 8] = b"TBCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: String,
    step: u64,
    epoch: usize,
    seed: u64,
    config: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: String,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
    /// Config document; `model` always present, `train` and `mann` when known.
    pub config: serde_json::Value,
    pub arrays: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, config: serde_json::Value, store: &ParamStore) -> Self {
        let arrays = store
            .iter()
            .map(|(_, name, v)| (name.to_string(), v.clone()))
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            stage: stage.into(),
            step: 0,
            epoch: 0,
            seed: 0,
            config,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: self.version,
            stage: self.stage.clone(),
            step: self.step,
            epoch: self.epoch,
            seed: self.seed,
            config: self.config.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, m)| ArrayEntry {
                    name: name.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(
            16 + header.len() + 8 * self.arrays.values().map(|m| m.len()).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.arrays.values() {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let bad = |reason: String| Error::format(name, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut offset = 16 + hlen;
        let mut arrays = BTreeMap::new();
        for entry in header.arrays {
            let n = entry.rows * entry.cols;
            let chunk = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("truncated array {}", entry.name)))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.insert(
                entry.name,
                Matrix::from_shape_vec((entry.rows, entry.cols), data).expect("sized"),
            );
            offset += 8 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes".into()));
        }
        Ok(Self {
            version: header.version,
            stage: header.stage,
            step: header.step,
            epoch: header.epoch,
            seed: header.seed,
            config: header.config,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        match fs::read(path) {
            Ok(bytes) => Self::from_bytes(&bytes, &path.display().to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                Err(Error::MissingCheckpoint(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Deserializes one section of the config document.
    pub fn config_section<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.config.get(key) {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(v) => {
                serde_json::from_value(v.clone())
                    .map(Some)
                    .map_err(|e| Error::ConfigMismatch {
                        key: key.into(),
                        reason: e.to_string(),
                    })
            }
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.config_section("model")?
            .ok_or_else(|| Error::ConfigMismatch {
                key: "model".into(),
                reason: "checkpoint has no model config".into(),
            })
    }
}

/// Copies every array under `prefix` into `store`.
///
/// Strict: each store parameter under `prefix` must be present with an equal
/// shape, and the checkpoint may hold no extra arrays under `prefix`.
pub fn restore_strict(
    store: &mut ParamStore,
    arrays: &BTreeMap<String, Matrix>,
    prefix: &str,
) -> Result<()> {
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .collect();
    for &id in &ids {
        let name = store.name(id).to_string();
        let src = arrays
            .get(&name)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks parameter {name}")))?;
        if src.dim() != store.get(id).dim() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: checkpoint {:?}, config implies {:?}",
                src.dim(),
                store.get(id).dim()
            )));
        }
        store.get_mut(id).assign(src);
    }
    let expected = arrays.keys().filter(|k| k.starts_with(prefix)).count();
    if expected != ids.len() {
        let extra: Vec<_> = arrays
            .keys()
            .filter(|k| k.starts_with(prefix) && store.find(k).is_none())
            .collect();
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds unexpected parameters {extra:?}"
        )));
    }
    Ok(())
}

const MODEL_PREFIXES: [&str; 3] = ["encoder.", "decoder.", "head."];

impl MaeModel {
    pub fn to_checkpoint(&self, stage: &str, extra: serde_json::Value) -> Checkpoint {
        let mut config = serde_json::Map::new();
        config.insert(
            "model".into(),
            serde_json::to_value(&self.cfg).expect("config serializes"),
        );
        if let serde_json::Value::Object(map) = extra {
            config.extend(map);
        }
        let mut ck = Checkpoint::new(stage, serde_json::Value::Object(config), &self.store);
        ck.seed = self.seed();
        ck
    }

    /// Rebuilds the model from its stored config and loads every array.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = ck.model_config()?;
        let mut model = MaeModel::new(cfg, ck.seed)?;
        for prefix in MODEL_PREFIXES {
            restore_strict(&mut model.store, &ck.arrays, prefix)?;
        }
        Ok(model)
    }

    /// Loads backbone weights (encoder and decoder) from a checkpoint whose
    /// geometry matches; the head, if any, keeps its own initialization.
    /// Drop-path and dropout rates may differ.
    pub fn load_backbone(&mut self, ck: &Checkpoint) -> Result<()> {
        let other = ck.model_config()?;
        // Regularization rates are training choices, not geometry.
        let shape = |e: &super::config::EncoderConfig| super::config::EncoderConfig {
            drop_path_rate: 0.0,
            dropout: 0.0,
            ..*e
        };
        if other.input != self.cfg.input
            || shape(&other.encoder) != shape(&self.cfg.encoder)
            || other.decoder != self.cfg.decoder
        {
            return Err(Error::ConfigMismatch {
                key: "model".into(),
                reason: "checkpoint backbone geometry differs from the requested config".into(),
            });
        }
        restore_strict(&mut self.store, &ck.arrays, "encoder.")?;
        restore_strict(&mut self.store, &ck.arrays, "decoder.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;
    use crate::model::config::{ClassifierHead, InputGeometry};
    use ndarray::Array4;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::build(
            InputGeometry {
                frames: 2,
                height: 8,
                width: 8,
                channels: 3,
            },
            4,
            2,
            false,
            8,
            1,
            2,
            8,
            1,
            2,
        );
        c.head = Some(ClassifierHead::mean(3));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = MaeModel::new(cfg(), 7).unwrap();
        let ck = model.to_checkpoint("pretrain_reconstruction", serde_json::json!({}));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ck);
        let restored = MaeModel::from_checkpoint(&back).unwrap();
        let clip = crate::dataset::ClipTensor::new(
            Array4::from_shape_fn((2, 8, 8, 3), |(t, y, x, c)| {
                ((t + y + x + c) % 5) as f32 / 4.0
            }),
            10.0,
        );
        let plan = sample_mask(4, 0.5, 1).unwrap();
        let a = model.reconstruct(&clip, &plan).unwrap();
        let b = restored.reconstruct(&clip, &plan).unwrap();
        assert!(a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(
            model.logits(&[&clip]).unwrap(),
            restored.logits(&[&clip]).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = MaeModel::new(cfg(), 7).unwrap();
        let mut ck = model.to_checkpoint("x", serde_json::json!({}));
        ck.arrays
            .insert("encoder.norm.gamma".into(), Matrix::zeros((1, 9)));
        assert!(matches!(
            MaeModel::from_checkpoint(&ck),
            Err(Error::ShapeMismatch(_))
        ));
        let mut ck = model.to_checkpoint("x", serde_json::json!({}));
        ck.arrays
            .insert("encoder.bogus".into(), Matrix::zeros((1, 1)));
        assert!(matches!(
            MaeModel::from_checkpoint(&ck),
            Err(Error::ShapeMismatch(_))
        ));
        let mut ck = model.to_checkpoint("x", serde_json::json!({}));
        ck.arrays.remove("decoder.head.bias");
        assert!(MaeModel::from_checkpoint(&ck).is_err());
    }

    #[test]
    fn missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Checkpoint::load(&dir.path().join("nope.ckpt")),
            Err(Error::MissingCheckpoint(_))
        ));
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"TBCKPT01garbage").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
