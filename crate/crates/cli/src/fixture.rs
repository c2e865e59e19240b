//! Writes the bundled toy workload as a ready-to-run pipeline directory.

use std::path::{Path, PathBuf};

use cimq_core::crossbar::HardwareConfig;
use cimq_core::fixtures::{rigged_fixture, toy_fixture};
use cimq_core::strips::HutchinsonConfig;
use cimq_core::threshold::ThresholdOptConfig;

use crate::config::{AlignmentConfig, CalibrationConfig, DataPaths, PipelineConfig, SweepConfig};
use crate::error::{CliError, Result};
use crate::io::{write_dataset, write_model, write_text};

pub const CONFIG_FILE: &str = "config.toml";

/// Trains the toy CNN (or its rigged variant) and writes `model/`, `data/`
/// and `config.toml` into `dir`. Returns the config path.
pub fn write_fixture(dir: &Path, seed: u64, rigged: bool) -> Result<PathBuf> {
    let fx = if rigged { rigged_fixture(seed) } else { toy_fixture(seed) }.map_err(|e| CliError::config(dir, e))?;
    let io_err = |e| CliError::config(dir, e);
    write_model(&dir.join("model"), &fx.model).map_err(io_err)?;
    let data = DataPaths {
        train_inputs: "data/train_inputs.cimt".into(),
        train_labels: "data/train_labels.cimt".into(),
        eval_inputs: "data/eval_inputs.cimt".into(),
        eval_labels: "data/eval_labels.cimt".into(),
    };
    std::fs::create_dir_all(dir.join("data")).map_err(|e| CliError::config(dir, e))?;
    write_dataset(&dir.join(&data.train_inputs), &dir.join(&data.train_labels), &fx.train).map_err(io_err)?;
    write_dataset(&dir.join(&data.eval_inputs), &dir.join(&data.eval_labels), &fx.eval).map_err(io_err)?;
    let config = PipelineConfig {
        model: "model/manifest.json".into(),
        data,
        calibration: CalibrationConfig::default(),
        hutchinson: HutchinsonConfig::default(),
        optimizer: ThresholdOptConfig::default(),
        alignment: AlignmentConfig::default(),
        hardware: HardwareConfig::default(),
        sweep: SweepConfig::default(),
        out: Some("out".into()),
    };
    let text = toml::to_string_pretty(&config).map_err(|e| CliError::config(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    write_text(&path, &text).map_err(io_err)?;
    Ok(path)
}
