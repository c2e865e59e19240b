//! Model manifests, datasets and artifact file helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cimq_core::tensor::io::{read_tensor, write_tensor};
use cimq_core::tensor::{Dataset, Layer, ModelGraph, NamedTensors};
use cimq_core::{CimError, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Portable model description: layers plus one CIMT file per parameter,
/// paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub parameters: BTreeMap<String, PathBuf>,
}

/// Loads a model and returns it with every file it was read from.
pub fn load_model(manifest_path: &Path) -> Result<(ModelGraph, Vec<PathBuf>)> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CliError::config(manifest_path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| CliError::config(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut files = vec![manifest_path.to_path_buf()];
    let mut params = NamedTensors::new();
    for (name, rel) in &manifest.parameters {
        let p = base.join(rel);
        params.insert(name.clone(), read_tensor(&p).map_err(|e| CliError::config(&p, e))?);
        files.push(p);
    }
    let model = ModelGraph::new(manifest.input_shape, manifest.num_classes, manifest.layers, params)
        .map_err(|e| CliError::config(manifest_path, e))?;
    Ok((model, files))
}

/// Writes `manifest.json` plus `<param>.cimt` files into `dir`. Returns the
/// written paths in a fixed order.
pub fn write_model(dir: &Path, model: &ModelGraph) -> std::result::Result<Vec<PathBuf>, CimError> {
    fs::create_dir_all(dir).map_err(|e| CimError::io(dir, e))?;
    let mut written = Vec::new();
    let mut parameters = BTreeMap::new();
    for (name, t) in model.params() {
        let file = PathBuf::from(format!("{name}.cimt"));
        let p = dir.join(&file);
        write_tensor(&p, t)?;
        written.push(p);
        parameters.insert(name.clone(), file);
    }
    let manifest = ModelManifest {
        input_shape: model.input_shape().to_vec(),
        num_classes: model.num_classes(),
        layers: model.layers().to_vec(),
        parameters,
    };
    let p = dir.join("manifest.json");
    write_text(&p, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    written.insert(0, p);
    Ok(written)
}

pub fn load_dataset(inputs: &Path, labels: &Path, num_classes: usize) -> Result<Dataset> {
    let x = read_tensor(inputs).map_err(|e| CliError::config(inputs, e))?;
    let y = read_tensor(labels).map_err(|e| CliError::config(labels, e))?;
    let labels_vec = y
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::config(labels, format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(x, labels_vec, num_classes).map_err(|e| CliError::config(inputs, e))
}

pub fn write_dataset(inputs: &Path, labels: &Path, data: &Dataset) -> std::result::Result<(), CimError> {
    write_tensor(inputs, data.inputs())?;
    let y = Tensor::new(vec![data.len()], data.labels().iter().map(|&l| l as f64).collect())?;
    write_tensor(labels, &y)
}

pub fn write_text(path: &Path, text: &str) -> std::result::Result<(), CimError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CimError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CimError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> std::result::Result<(), CimError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CimError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CimError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file, or `None` if it cannot be read.
pub fn file_hash(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}
