//! JSON checkpoint container. Floats are written in shortest round-trip form
//! and parsed back exactly, so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BackboneSpec, Model, Params};
use super::train::TrainConfig;
use crate::error::{DgdmError, Result};
use crate::layer::DgdmConfig;

pub const CHECKPOINT_FORMAT: &str = "dgdm-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: BackboneSpec,
    pub dgdm: DgdmConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub params: Params,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train: &TrainConfig, seed: u64, epoch: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: model.spec().clone(),
            dgdm: *model.dgdm_config(),
            train: *train,
            seed,
            epoch,
            params: model.params.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        Model::from_parts(self.spec, self.dgdm, self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| DgdmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DgdmError::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| DgdmError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(DgdmError::Checkpoint(format!(
                "unsupported format `{}` in {}",
                ckpt.format,
                path.display()
            )));
        }
        Ok(ckpt)
    }
}
