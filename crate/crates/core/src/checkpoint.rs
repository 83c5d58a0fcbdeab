//! Versioned JSON snapshots of a training run.
//!
//! The shuffle order is a pure function of `(seed, epoch)`, so the model,
//! optimizer moments and completed-epoch count are enough to resume with
//! bit-identical results.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::QcnnModel;
use crate::train::{OptimizerState, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: QcnnModel,
    pub optimizer: OptimizerState,
    pub train: TrainConfig,
    /// Epochs completed so far; training resumes at this 0-based epoch.
    pub epochs_completed: usize,
    pub best_test_acc: Option<f64>,
}

impl Checkpoint {
    pub fn new(
        model: QcnnModel,
        optimizer: OptimizerState,
        train: TrainConfig,
        epochs_completed: usize,
        best_test_acc: Option<f64>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            model,
            optimizer,
            train,
            epochs_completed,
            best_test_acc,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_slice(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let ckpt: Self = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("corrupt checkpoint: {e}")))?;
        ckpt.model
            .config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored model config is invalid: {e}")))?;
        if ckpt.model.param_shapes() != shapes_of(&ckpt.optimizer) {
            return Err(Error::Checkpoint(
                "optimizer moments do not match the model parameters".into(),
            ));
        }
        Ok(ckpt)
    }
}

fn shapes_of(state: &OptimizerState) -> Vec<(usize, usize)> {
    state.first_moment.iter().map(|m| m.shape()).collect()
}
