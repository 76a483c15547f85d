//! Checkpoint directories: `manifest.json` plus `params.bin`, the parameters as
//! little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::{init_params, Family, ModelConfig, Transformer};
use crate::numerics::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub family: Family,
    pub model_config: serde_json::Value,
    pub train_config: Option<TrainConfig>,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub vocab_hash: String,
    pub tensors: Vec<TensorEntry>,
}

/// Serializable model state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(
        family: Family,
        model_config: serde_json::Value,
        train_config: Option<TrainConfig>,
        step: u64,
        val_loss: Option<f64>,
        vocab_hash: String,
        params: ParamSet<f32>,
    ) -> Self {
        let tensors = params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), decay: p.decay })
            .collect();
        let manifest =
            Manifest { format_version: FORMAT_VERSION, family, model_config, train_config, step, val_loss, vocab_hash, tensors };
        Self { manifest, params }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
        let mut bytes = Vec::with_capacity(4 * self.params.scalar_count());
        for p in self.params.iter() {
            for x in p.value.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(dir.join(PAYLOAD_FILE), bytes).map_err(|e| TrainError::io(&dir.join(PAYLOAD_FILE), e))?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n").map_err(|e| TrainError::io(&dir.join(MANIFEST_FILE), e))
    }

    /// Loads and validates a checkpoint. When `vocab_hash` is given it must
    /// equal the manifest's.
    pub fn load(dir: &Path, vocab_hash: Option<&str>) -> Result<Self, TrainError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| TrainError::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        if let Some(h) = vocab_hash {
            if h != manifest.vocab_hash {
                return Err(TrainError::VocabMismatch { expected: h.to_string(), found: manifest.vocab_hash });
            }
        }
        let ppath = dir.join(PAYLOAD_FILE);
        let bytes = fs::read(&ppath).map_err(|e| TrainError::io(&ppath, e))?;
        let expected: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * 4;
        if bytes.len() < expected {
            return Err(TrainError::Checkpoint(format!("truncated payload: {} bytes, expected {expected}", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(TrainError::Checkpoint(format!(
                "payload has {} bytes but the manifest declares {expected}",
                bytes.len()
            )));
        }
        let mut params = ParamSet::new();
        let mut floats = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for t in &manifest.tensors {
            let n = t.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::Checkpoint(format!("tensor {} holds a non-finite value", t.name)));
            }
            let value = Tensor::new(t.shape.clone(), data).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            params.push(t.name.clone(), value, t.decay);
        }
        Ok(Self { manifest, params })
    }

    /// The model config as stored, decoded for `family`.
    pub fn model_config<C: for<'de> Deserialize<'de>>(&self, family: Family) -> Result<C, TrainError> {
        if self.manifest.family != family {
            return Err(TrainError::Checkpoint(format!(
                "checkpoint holds a {:?} model, not {:?}",
                self.manifest.family, family
            )));
        }
        serde_json::from_value(self.manifest.model_config.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
}

/// Checks that `params` has exactly the names and shapes of `layout`.
pub fn check_layout(params: &ParamSet<f32>, layout: &ParamSet<f32>) -> Result<(), TrainError> {
    if params.len() != layout.len() {
        return Err(TrainError::Checkpoint(format!(
            "checkpoint has {} tensors, the model needs {}",
            params.len(),
            layout.len()
        )));
    }
    for (p, q) in params.iter().zip(layout.iter()) {
        if p.name != q.name || p.value.shape() != q.value.shape() {
            return Err(TrainError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                p.name,
                p.value.shape(),
                q.name,
                q.value.shape()
            )));
        }
    }
    Ok(())
}

impl Transformer {
    pub fn to_checkpoint(&self, train: Option<TrainConfig>, step: u64, val_loss: Option<f64>, vocab_hash: &str) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::new(Family::Transformer, config, train, step, val_loss, vocab_hash.to_string(), self.params.clone())
    }

    /// Rebuilds the model. When `expected` is given, the stored config must
    /// match it; the error names the first differing field.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self, TrainError> {
        let config: ModelConfig = ckpt.model_config(Family::Transformer)?;
        if let Some(want) = expected {
            if let Some(field) = want.first_mismatch(&config) {
                return Err(TrainError::ConfigMismatch(field.to_string()));
            }
        }
        let layout = init_params(&config, 0).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        check_layout(&ckpt.params, &layout)?;
        Ok(Self { config, params: ckpt.params.clone() })
    }
}
