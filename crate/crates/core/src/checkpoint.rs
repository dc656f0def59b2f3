//! Versioned JSON checkpoints: every parameter tensor by name and shape plus
//! the config that produced it. Floats are written with round-trip
//! precision, so save/load is bit-exact.

use crate::config::ModelConfig;
use crate::model::{param_layout, ModelError, ModelParams};
use crate::tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SavedTensor {
    name: String,
    shape: Vec<usize>,
    requires_grad: bool,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    params: Vec<SavedTensor>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<(), ModelError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        params: params
            .store
            .iter()
            .map(|(name, t)| SavedTensor {
                name: name.to_string(),
                shape: t.shape.clone(),
                requires_grad: t.requires_grad,
                data: t.data.clone(),
            })
            .collect(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    use std::io::Write;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "version {} (supported: {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let layout = param_layout(&file.config);
    if layout.len() != file.params.len() {
        return Err(ModelError::IncompatibleCheckpoint(format!(
            "{} tensors, config expects {}",
            file.params.len(),
            layout.len()
        )));
    }
    let mut store = ParamStore::new();
    for ((name, shape, _), saved) in layout.into_iter().zip(file.params) {
        if saved.name != name || saved.shape != shape {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "tensor {:?} with shape {:?}, config expects {:?} with shape {:?}",
                saved.name, saved.shape, name, shape
            )));
        }
        if saved.data.len() != shape.iter().product::<usize>() {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "tensor {name:?} data length {} does not match shape {shape:?}",
                saved.data.len()
            )));
        }
        if saved.data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::IncompatibleCheckpoint(format!(
                "tensor {name:?} contains non-finite values"
            )));
        }
        let mut t = Tensor::from_vec(saved.shape, saved.data);
        t.requires_grad = saved.requires_grad;
        store.push(saved.name, t);
    }
    Ok(ModelParams {
        config: file.config,
        store,
    })
}
