use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;
use crate::peeling::{ModelConfig, PeelModel};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    schema_version: u32,
    config: ModelConfig,
    params: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn write_checkpoint(model: &PeelModel, w: impl Write) -> Result<(), TrainError> {
    let ck = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: model.config.clone(),
        params: model
            .params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    serde_json::to_writer(w, &ck).map_err(|e| TrainError::Checkpoint(e.to_string()))
}

/// Rebuilds the model from its config and overwrites every parameter by name.
pub fn read_checkpoint(r: impl Read) -> Result<PeelModel, TrainError> {
    let ck: Checkpoint = serde_json::from_reader(r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported schema_version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            ck.schema_version
        )));
    }
    let mut model = PeelModel::new(ck.config)?;
    if ck.params.len() != model.params.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} parameters stored, model has {}",
            ck.params.len(),
            model.params.len()
        )));
    }
    let mut tensors = model.params.tensors().to_vec();
    for p in ck.params {
        let id = model
            .params
            .id(&p.name)
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter {}", p.name)))?;
        tensors[id.index()] = Tensor::new(p.shape, p.data)?;
    }
    model.params.set_tensors(tensors)?;
    Ok(model)
}

pub fn save_checkpoint(model: &PeelModel, path: &Path) -> Result<(), TrainError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PeelModel, TrainError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
