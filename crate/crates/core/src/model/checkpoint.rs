//! Checkpoints: parameters in a tensor archive (`<stem>.ebkt`) plus a JSON
//! sidecar (`<stem>.json`) holding `{config, seed, epoch}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Parameter};
use crate::error::{Error, Result};
use crate::tensor::archive::{self, ArchiveEntry};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
}

pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("ebkt"), stem.with_extension("json"))
}

pub fn save<T: Scalar>(model: &Model<T>, stem: &Path, seed: u64, epoch: usize) -> Result<()> {
    let (tensors, manifest) = paths(stem);
    let entries: Vec<ArchiveEntry> = model
        .parameters()
        .iter()
        .map(|p| ArchiveEntry::from_tensor(&p.name, &p.tensor))
        .collect();
    archive::write(&tensors, &entries)?;
    crate::io::write_json_atomic(
        &manifest,
        &CheckpointManifest {
            config: model.config().clone(),
            seed,
            epoch,
        },
    )
}

pub fn load<T: Scalar>(stem: &Path) -> Result<(Model<T>, CheckpointManifest)> {
    let (tensors, manifest_path) = paths(stem);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let entries = archive::read(&tensors)?;
    let template = Model::<T>::build(&manifest.config, manifest.seed)?;
    if entries.len() != template.parameters().len() {
        return Err(Error::format(
            &tensors,
            format!(
                "{} tensors, model needs {}",
                entries.len(),
                template.parameters().len()
            ),
        ));
    }
    let params = template
        .parameters()
        .iter()
        .zip(&entries)
        .map(|(p, e)| {
            if p.name != e.name {
                return Err(Error::format(
                    &tensors,
                    format!("expected {}, found {}", p.name, e.name),
                ));
            }
            Ok(Parameter {
                name: e.name.clone(),
                tensor: e.to_tensor()?.with_requires_grad(true),
                prunable: p.prunable,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Model::from_parameters(manifest.config.clone(), params)?,
        manifest,
    ))
}
