//! Binary checkpoint: magic line, u64 LE header length, JSON header, then
//! every tensor as little-endian f64 in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, EarlyStopping, PlateauScheduler};
use super::{TrainConfig, TrainerError};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "AVSQA-CKPT-1";

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Full training state after some number of epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub steps: usize,
    pub best_val_loss: Option<f64>,
    pub params: Vec<NamedTensor>,
    pub adam_step: u64,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub scheduler: PlateauScheduler,
    pub early_stop: EarlyStopping,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scalar: String,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: u64,
    epoch: usize,
    steps: usize,
    best_val_loss: Option<f64>,
    adam_step: u64,
    scheduler: PlateauScheduler,
    early_stop: EarlyStopping,
    history: Vec<EpochMetrics>,
    params: Vec<TensorEntry>,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

fn named<T: Scalar>(name: &str, t: &Tensor<T>) -> NamedTensor {
    NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.to_f64() }
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn capture<T: Scalar>(
        model: &Model<T>,
        adam: &Adam<T>,
        train_config: &TrainConfig,
        seed: u64,
        epoch: usize,
        steps: usize,
        scheduler: &PlateauScheduler,
        early_stop: &EarlyStopping,
        history: &[EpochMetrics],
    ) -> Self {
        let store = model.params();
        let trainable: Vec<usize> = store.trainable_ids().collect();
        Self {
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            seed,
            epoch,
            steps,
            best_val_loss: early_stop.best,
            params: store.entries().iter().map(|e| named(&e.name, &e.value)).collect(),
            adam_step: adam.step,
            adam_m: trainable.iter().zip(&adam.m).map(|(&id, m)| named(&store.entry(id).name, m)).collect(),
            adam_v: trainable.iter().zip(&adam.v).map(|(&id, v)| named(&store.entry(id).name, v)).collect(),
            scheduler: scheduler.clone(),
            early_stop: early_stop.clone(),
            history: history.to_vec(),
        }
    }

    /// The network with the stored parameters in precision `T`.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>, TrainerError> {
        let mut m = Model::<T>::new(self.model_config.clone(), self.seed)?;
        let items: Vec<(String, Vec<usize>, Vec<f64>)> =
            self.params.iter().map(|p| (p.name.clone(), p.shape.clone(), p.data.clone())).collect();
        m.params_mut().load(&items)?;
        Ok(m)
    }

    /// Optimizer state matching `model`'s trainable parameters.
    pub fn adam<T: Scalar>(&self, model: &Model<T>) -> Result<Adam<T>, TrainerError> {
        let store = model.params();
        let ids: Vec<usize> = store.trainable_ids().collect();
        if ids.len() != self.adam_m.len() || ids.len() != self.adam_v.len() {
            return Err(TrainerError::Checkpoint("optimizer moments do not match the model".into()));
        }
        let pick = |list: &[NamedTensor]| -> Result<Vec<Tensor<T>>, TrainerError> {
            ids.iter()
                .zip(list)
                .map(|(&id, t)| {
                    let e = store.entry(id);
                    if e.name != t.name || e.value.shape() != &t.shape[..] {
                        return Err(TrainerError::Checkpoint(format!("optimizer moment {} does not match {}", t.name, e.name)));
                    }
                    Ok(Tensor::from_f64(&t.shape, &t.data))
                })
                .collect()
        };
        Ok(Adam { step: self.adam_step, m: pick(&self.adam_m)?, v: pick(&self.adam_v)? })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainerError> {
        let entries = |l: &[NamedTensor]| l.iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() }).collect();
        let header = Header {
            scalar: "f64".into(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            steps: self.steps,
            best_val_loss: self.best_val_loss,
            adam_step: self.adam_step,
            scheduler: self.scheduler.clone(),
            early_stop: self.early_stop.clone(),
            history: self.history.clone(),
            params: entries(&self.params),
            adam_m: entries(&self.adam_m),
            adam_v: entries(&self.adam_v),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainerError> {
        let bad = |m: &str| TrainerError::Checkpoint(m.to_string());
        let magic = CHECKPOINT_MAGIC.len() + 1;
        if bytes.len() < magic + 8 || &bytes[..magic - 1] != CHECKPOINT_MAGIC.as_bytes() || bytes[magic - 1] != b'\n' {
            return Err(bad("missing AVSQA-CKPT-1 header"));
        }
        let hlen = u64::from_le_bytes(bytes[magic..magic + 8].try_into().unwrap()) as usize;
        let body = &bytes[magic + 8..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let h: Header = serde_json::from_slice(&body[..hlen])?;
        if h.scalar != "f64" {
            return Err(TrainerError::Checkpoint(format!("unsupported data type {}", h.scalar)));
        }
        let mut data = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |list: Vec<TensorEntry>| -> Result<Vec<NamedTensor>, TrainerError> {
            list.into_iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let d: Vec<f64> = data.by_ref().take(n).collect();
                    if d.len() != n {
                        return Err(bad("truncated tensor data"));
                    }
                    Ok(NamedTensor { name: e.name, shape: e.shape, data: d })
                })
                .collect()
        };
        let params = take(h.params)?;
        let adam_m = take(h.adam_m)?;
        let adam_v = take(h.adam_v)?;
        let used: usize = params.iter().chain(&adam_m).chain(&adam_v).map(|t| t.data.len()).sum();
        if (body.len() - hlen) != used * 8 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model_config: h.model_config,
            train_config: h.train_config,
            seed: h.seed,
            epoch: h.epoch,
            steps: h.steps,
            best_val_loss: h.best_val_loss,
            params,
            adam_step: h.adam_step,
            adam_m,
            adam_v,
            scheduler: h.scheduler,
            early_stop: h.early_stop,
            history: h.history,
        })
    }

    /// Writes through a temporary file so a crash never leaves half a checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainerError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
