//! Versioned model checkpoints: one JSON document holding the model config,
//! its dtype, the current temperature, and every named tensor with its
//! shape. Values are stored as f64, which round-trips both element types
//! exactly (f32 widens losslessly; serde_json prints shortest-round-trip
//! decimals).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Dtype, Element};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct TensorRecord {
    pub(crate) name: String,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dtype: Dtype,
    /// Temperature the attention branches held when the snapshot was taken.
    pub tau: f64,
    pub model: ModelConfig,
    pub(crate) tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model<E: Element>(model: &Model<E>) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, t) in model.named_tensors() {
            let data = t.to_f64_vec();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "tensor {name} holds non-finite values; refusing to checkpoint"
                )));
            }
            tensors.push(TensorRecord {
                name,
                shape: t.shape().to_vec(),
                data,
            });
        }
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            dtype: E::DTYPE,
            tau: model.tau(),
            model: model.config(),
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("checkpoint serialization failed: {e}")))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let cp: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("unreadable checkpoint: {e}")))?;
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                cp.version
            )));
        }
        Ok(cp)
    }

    /// Rebuilds the model and installs every stored tensor. The element type
    /// must match the stored dtype; running statistics count as restored, so
    /// the model evaluates immediately.
    pub fn into_model<E: Element>(&self) -> Result<Model<E>> {
        if E::DTYPE != self.dtype {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, cannot load as {}",
                self.dtype,
                E::DTYPE
            )));
        }
        // tensor values are about to be overwritten; the init seed is moot
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model: Model<E> = self.model.build(&mut rng)?;
        let mut stored: BTreeMap<&str, &TensorRecord> = self
            .tensors
            .iter()
            .map(|r| (r.name.as_str(), r))
            .collect();
        for (name, tensor) in model.named_tensors() {
            let rec = stored.remove(name.as_str()).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing tensor {name}"))
            })?;
            if rec.shape != tensor.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} has shape {:?}, model wants {:?}",
                    rec.shape,
                    tensor.shape()
                )));
            }
            tensor.set_data(rec.data.iter().map(|&v| E::from_f64(v)).collect())?;
        }
        if let Some((name, _)) = stored.pop_first() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} does not exist in the model"
            )));
        }
        model.set_tau(self.tau)?;
        model.mark_bn_initialized();
        Ok(model)
    }
}

/// Snapshot straight to disk.
pub fn save<E: Element>(path: &Path, model: &Model<E>) -> Result<()> {
    Checkpoint::from_model(model)?.write(path)
}

/// Load with the element type fixed by the caller.
pub fn load<E: Element>(path: &Path) -> Result<Model<E>> {
    Checkpoint::read(path)?.into_model()
}
