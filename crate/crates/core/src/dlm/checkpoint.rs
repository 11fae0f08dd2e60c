//! JSON checkpoints: the config plus every named parameter tensor and the
//! batch-norm running statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Dlm;
use super::{DlmConfig, DlmError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DlmConfig,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn of(model: &mut Dlm) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |p| {
            params.push(NamedTensor {
                name: p.name.clone(),
                values: p.value.clone(),
            })
        });
        let buffers = model.buffers_mut().into_iter().map(|b| b.clone()).collect();
        Self {
            config: model.config().clone(),
            params,
            buffers,
        }
    }

    pub fn into_model(self) -> Result<Dlm, DlmError> {
        let mut model = Dlm::new(self.config)?;
        let names = model.param_names();
        if names.len() != self.params.len() {
            return Err(DlmError::State(format!(
                "checkpoint has {} tensors, model {}",
                self.params.len(),
                names.len()
            )));
        }
        for (n, t) in names.iter().zip(&self.params) {
            if *n != t.name {
                return Err(DlmError::State(format!("expected {n}, found {}", t.name)));
            }
        }
        let mut state: Vec<Vec<f64>> = self.params.into_iter().map(|t| t.values).collect();
        state.extend(self.buffers);
        model.load_state(&state)?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &mut Dlm, path: &Path) -> Result<(), DlmError> {
    let text = serde_json::to_string(&Checkpoint::of(model)).map_err(|e| DlmError::Io(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| DlmError::Io(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Dlm, DlmError> {
    let text = std::fs::read_to_string(path).map_err(|e| DlmError::Io(e.to_string()))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| DlmError::Io(e.to_string()))?;
    ck.into_model()
}
