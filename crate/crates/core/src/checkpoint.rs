//! Versioned JSON checkpoints holding every parameter (pool included), the
//! model configuration and an optional RNG state.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Result, TppError};
use crate::model::{ModelConfig, PromptTpp};
use crate::params::ParamGroup;
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "streamtpp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamRecord>,
    pub rng: Option<ChaCha8Rng>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &PromptTpp<T>, rng: Option<&ChaCha8Rng>) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                data: p.value.iter().map(|v| v.f64()).collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params,
            rng: rng.cloned(),
        }
    }

    /// Rebuilds a model with the stored configuration and parameters.
    pub fn restore<T: Scalar>(&self) -> Result<PromptTpp<T>> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(TppError::Config(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        let mut model = PromptTpp::new(self.config.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(TppError::Shape(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (p, rec) in model.store.iter_mut().zip(&self.params) {
            if p.name != rec.name || p.value.dim() != (rec.rows, rec.cols) || rec.data.len() != rec.rows * rec.cols {
                return Err(TppError::Shape(format!(
                    "parameter {} does not match checkpoint entry {}",
                    p.name, rec.name
                )));
            }
            p.value = Mat::from_shape_vec((rec.rows, rec.cols), rec.data.iter().map(|&v| T::of(v)).collect())
                .map_err(|e| TppError::Shape(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
