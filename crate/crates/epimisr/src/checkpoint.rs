//! Checkpoint directories: `index.json` plus one EPTN file per parameter.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use epimisr_core::pipeline::{Model, ModelConfig};
use epimisr_core::{ParamStore, Scalar, Tensor};

use crate::eptn;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};

pub const FORMAT: &str = "epimisr-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Training steps that produced the weights.
    pub steps: usize,
    pub params: Vec<ParamEntry>,
}

pub fn save<T: Scalar>(dir: &Path, model: &Model<T>, steps: usize) -> Result<()> {
    let mut params = Vec::with_capacity(model.params.len());
    for (name, t) in model.params.iter() {
        let file = PathBuf::from("params").join(format!("{name}.eptn"));
        eptn::write_tensor(&dir.join(&file), t)?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let index = CheckpointIndex {
        format: FORMAT.into(),
        version: 1,
        config: model.config,
        steps,
        params,
    };
    write_json(&dir.join("index.json"), &index)
}

/// Loads weights and checks them against the parameter set their config
/// defines.
pub fn load<T: Scalar>(dir: &Path) -> Result<(Model<T>, CheckpointIndex)> {
    let path = dir.join("index.json");
    let index: CheckpointIndex = read_json(&path)?;
    if index.format != FORMAT || index.version != 1 {
        return Err(Error::format(&path, "not a version 1 epimisr checkpoint"));
    }
    let reference = Model::<T>::new(index.config, 0)?;
    let mut params = ParamStore::new();
    for e in &index.params {
        let t: Tensor<T> = eptn::read_tensor(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::format(
                &path,
                format!("`{}` has shape {:?}, index says {:?}", e.name, t.shape(), e.shape),
            ));
        }
        match reference.params.get(&e.name) {
            Ok(r) if r.shape() == t.shape() => {}
            _ => {
                return Err(Error::format(
                    &path,
                    format!("`{}` does not belong to the configured model", e.name),
                ))
            }
        }
        params.insert(e.name.clone(), t);
    }
    if params.len() != reference.params.len() {
        return Err(Error::format(&path, "checkpoint is missing parameters"));
    }
    Ok((
        Model {
            config: index.config,
            params,
        },
        index,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
        save(dir.path(), &m, 7).unwrap();
        let (back, index) = load::<f32>(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(index.steps, 7);
    }

    #[test]
    fn foreign_parameters_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::<f32>::new(ModelConfig::default(), 3).unwrap();
        m.params.insert("stray", Tensor::zeros(&[1]));
        save(dir.path(), &m, 0).unwrap();
        assert!(load::<f32>(dir.path()).is_err());
    }
}
