//! Fixture directories and process helpers for the CLI tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn cimq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimq"))
        .args(args)
        .output()
        .expect("cimq binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the bundled fixture into `dir` and returns its config path.
pub fn fixture(dir: &Path, seed: u64, rigged: bool) -> PathBuf {
    cimq::fixture::write_fixture(dir, seed, rigged).expect("fixture writes")
}

/// Rewrites keys of the config: `edits` are `(table, key, value)`.
pub fn edit_config(path: &Path, edits: &[(&str, &str, toml::Value)]) {
    let mut doc: toml::Table = std::fs::read_to_string(path).unwrap().parse().unwrap();
    for (table, key, value) in edits {
        doc.get_mut(*table)
            .and_then(|t| t.as_table_mut())
            .unwrap_or_else(|| panic!("config has no [{table}]"))
            .insert((*key).to_string(), value.clone());
    }
    std::fs::write(path, toml::to_string(&doc).unwrap()).unwrap();
}

/// Fewer calibration samples and probes: same pipeline, a fraction of the
/// scoring time.
pub fn light_fixture(dir: &Path, seed: u64, rigged: bool) -> PathBuf {
    let config = fixture(dir, seed, rigged);
    edit_config(
        &config,
        &[
            ("calibration", "samples", toml::Value::Integer(64)),
            ("hutchinson", "m", toml::Value::Integer(4)),
        ],
    );
    config
}

pub fn sweep(config: &Path, crs: &[f64], include_optimized: bool) {
    let cr = toml::Value::Array(crs.iter().map(|&c| toml::Value::Float(c)).collect());
    edit_config(
        config,
        &[
            ("sweep", "cr", cr),
            ("sweep", "include_optimized", toml::Value::Boolean(include_optimized)),
        ],
    );
}

pub fn out_dir(config: &Path) -> PathBuf {
    config.parent().unwrap().join("out")
}

pub fn run_pipeline(config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["pipeline", "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = cimq(&args);
    assert!(o.status.success(), "pipeline failed: {}", stderr(&o));
    o
}

/// SHA-256 of every file under `root`, keyed by relative path.
pub fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
