//! Checkpoint directories: one HTNT file per parameter plus `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hatnet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{io, ParamStore, Real};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    model: ModelConfig,
    /// Parameter name -> file name inside the directory.
    params: BTreeMap<String, String>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    /// Free-form metadata (epoch, validation accuracy, ...).
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(
    dir: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ParamStore<T>,
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (name, t) in params.iter() {
        let file = format!("{name}.htnt");
        io::save(dir.join(&file), t)?;
        files.insert(name.to_string(), file);
    }
    let manifest = Manifest {
        model: config.clone(),
        params: files,
        meta,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and checks that its tensors match the layout the
/// stored config implies.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<CheckpointFile> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut params = ParamStore::new();
    for (name, file) in &manifest.params {
        if file.contains('/') || file.contains('\\') || file.starts_with("..") {
            return Err(Error::Format(format!("parameter file `{file}` escapes the checkpoint")));
        }
        params.insert(name.clone(), io::load(dir.join(file))?);
    }
    let expected = Hatnet::new(manifest.model.clone())?.init_params::<f32>(0);
    expected.check_layout(&params)?;
    Ok(CheckpointFile {
        config: manifest.model,
        params,
        meta: manifest.meta,
    })
}
