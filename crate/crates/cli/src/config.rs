//! Pipeline configuration (TOML) and the inputs it references.
//!
//! Relative paths resolve against the config file's directory. Everything
//! is loaded and validated here, before any stage runs.

use std::fs;
use std::path::{Path, PathBuf};

use cimq_core::crossbar::HardwareConfig;
use cimq_core::strips::HutchinsonConfig;
use cimq_core::tensor::{Dataset, ModelGraph};
use cimq_core::threshold::{AlignMode, ThresholdOptConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io::{load_dataset, load_model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Model manifest (JSON).
    pub model: PathBuf,
    pub data: DataPaths,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub hutchinson: HutchinsonConfig,
    #[serde(default)]
    pub optimizer: ThresholdOptConfig,
    #[serde(default)]
    pub alignment: AlignmentConfig,
    #[serde(default)]
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// CIMT tensors: inputs `n×C×H×W`, labels `n` (class indices stored as reals).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_inputs: PathBuf,
    pub train_labels: PathBuf,
    pub eval_inputs: PathBuf,
    pub eval_labels: PathBuf,
}

/// Subsample of the training set used for scoring and threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { samples: 256, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub enabled: bool,
    pub mode: AlignMode,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            enabled: true,
            mode: AlignMode::PerLayer,
        }
    }
}

/// Fixed compression ratios to evaluate alongside (or instead of) the
/// optimized threshold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub cr: Vec<f64>,
    /// Keep the optimized run when a sweep is configured.
    pub include_optimized: bool,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub hw: Vec<String>,
}

/// A validated config with its inputs in memory.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
    /// Hex SHA-256 over the config bytes, the overrides that change results,
    /// and every referenced input file.
    pub hash: String,
    pub model: ModelGraph,
    pub train: Dataset,
    pub eval: Dataset,
}

impl PipelineConfig {
    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |m: String| Err(CliError::config(path, m));
        if self.calibration.samples == 0 {
            return bad("calibration.samples must be >= 1".into());
        }
        if self.hutchinson.m == 0 {
            return bad("hutchinson.m must be >= 1".into());
        }
        self.optimizer.validate().map_err(|e| CliError::config(path, e))?;
        self.hardware.validate().map_err(|e| CliError::config(path, e))?;
        if let Some(cr) = self.sweep.cr.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return bad(format!("sweep.cr entries must lie in [0, 1], got {cr}"));
        }
        Ok(())
    }
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| CliError::config(path, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::config(path, e))?;
    let mut config: PipelineConfig = toml::from_str(&text).map_err(|e| CliError::config(path, e))?;
    if let Some(seed) = overrides.seed {
        config.calibration.seed = seed;
        config.hutchinson.seed = seed;
    }
    for kv in &overrides.hw {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(path, format!("--hw-override expects key=value, got '{kv}'")))?;
        config
            .hardware
            .set(key.trim(), value.trim())
            .map_err(|e| CliError::config(path, e))?;
    }
    config.validate(path)?;

    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let out_dir = overrides
        .out
        .clone()
        .or_else(|| config.out.as_deref().map(resolve))
        .unwrap_or_else(|| base.join("cimq-out"));

    let model_path = resolve(&config.model);
    let (model, model_files) = load_model(&model_path)?;
    let classes = model.num_classes();
    let d = &config.data;
    let train = load_dataset(&resolve(&d.train_inputs), &resolve(&d.train_labels), classes)?;
    let eval = load_dataset(&resolve(&d.eval_inputs), &resolve(&d.eval_labels), classes)?;
    if train.sample_shape() != model.input_shape() || eval.sample_shape() != model.input_shape() {
        return Err(CliError::config(
            path,
            format!(
                "dataset samples {:?} / {:?} do not match model input {:?}",
                train.sample_shape(),
                eval.sample_shape(),
                model.input_shape()
            ),
        ));
    }

    let mut h = Sha256::new();
    h.update(&bytes);
    h.update(format!("{:?}{:?}", overrides.seed, overrides.hw).as_bytes());
    let inputs = model_files
        .iter()
        .cloned()
        .chain([d.train_inputs.clone(), d.train_labels.clone(), d.eval_inputs.clone(), d.eval_labels.clone()].map(|p| resolve(&p)));
    for file in inputs {
        let content = fs::read(&file).map_err(|e| CliError::config(&file, e))?;
        h.update(Sha256::digest(&content));
    }
    Ok(Loaded {
        config,
        out_dir,
        hash: hex::encode(h.finalize()),
        model,
        train,
        eval,
    })
}
