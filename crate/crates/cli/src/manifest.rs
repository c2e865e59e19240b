//! Run manifest: which stage consumed and produced which artifact hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cimq_core::CimError;
use serde::{Deserialize, Serialize};

use crate::io::{file_hash, write_text};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Artifact hashes keyed by path relative to the output directory. Wall-clock
/// times are reported on stderr, not stored, so the tree stays reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// The manifest in `out`, reset if it belongs to another config or
    /// tool version.
    pub fn open(out: &Path, config_hash: &str) -> Self {
        let fresh = RunManifest::new(config_hash);
        fs::read_to_string(out.join(MANIFEST_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
            .filter(|m| m.config_hash == fresh.config_hash && m.tool_version == fresh.tool_version)
            .unwrap_or(fresh)
    }

    pub fn save(&self, out: &Path) -> Result<(), CimError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_text(&out.join(MANIFEST_FILE), &(text + "\n"))
    }

    /// True when `stage` last ran on exactly `inputs` and its outputs are
    /// still on disk unchanged.
    pub fn up_to_date(&self, out: &Path, stage: &str, inputs: &BTreeMap<String, String>) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        &rec.inputs == inputs
            && !rec.outputs.is_empty()
            && rec
                .outputs
                .iter()
                .all(|(rel, h)| file_hash(&out.join(rel)).as_deref() == Some(h.as_str()))
    }

    pub fn record(&mut self, out: &Path, stage: &str, inputs: BTreeMap<String, String>, outputs: &[PathBuf]) {
        let outputs = outputs
            .iter()
            .map(|p| {
                let hash = file_hash(p).unwrap_or_default();
                (relative(out, p), hash)
            })
            .collect();
        self.stages.insert(stage.to_string(), StageRecord { inputs, outputs });
    }

    /// Every artifact path with its hash, across stages.
    pub fn artifacts(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|s| s.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }
}

/// `p` relative to `out`, with `/` separators.
pub fn relative(out: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(out).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
