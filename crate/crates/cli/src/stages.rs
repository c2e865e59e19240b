//! The six pipeline stages. Each reads its upstream artifacts from the
//! output directory, never from memory, and writes its own under
//! `<out>/<stage>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cimq_core::crossbar::{
    compare_paths, place, simulate_cost, write_cost_csv, write_placement_csv, CostReport, PathComparison,
    TilePlacement, Workload,
};
use cimq_core::quant::{apply_map, assign_clusters, compress_with_map, compression_ratio, BitwidthMap};
use cimq_core::strips::{
    decompose_strips, rank_strips, read_sensitivity_csv, score_strips, write_sensitivity_csv, SensitivityRecord,
    StripWeight,
};
use cimq_core::threshold::{aligned_map, optimize_threshold, write_iteration_csv, AlignMode, RankScale, StopReason};
use cimq_core::tensor::Dataset;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::error::{CliError, InStage, Result};
use crate::io::{file_hash, write_bytes, write_model, write_text};
use crate::manifest::RunManifest;
use crate::report::write_report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Stage {
    Score,
    Optimize,
    Compress,
    Place,
    Simulate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Score,
        Stage::Optimize,
        Stage::Compress,
        Stage::Place,
        Stage::Simulate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Score => "score",
            Stage::Optimize => "optimize",
            Stage::Compress => "compress",
            Stage::Place => "place",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    /// This stage and every stage before it.
    pub fn through(self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| *s <= self).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One compressed variant of the model carried through compress → simulate.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub name: String,
    pub kind: RunKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunKind {
    /// The optimizer's threshold after capacity alignment.
    Optimized,
    /// The unaligned threshold putting `round(cr·R)` strips in the 4-bit cluster.
    Sweep(f64),
}

pub fn runs(loaded: &Loaded) -> Vec<Run> {
    let sweep = &loaded.config.sweep;
    let mut out: Vec<Run> = sweep
        .cr
        .iter()
        .map(|&cr| Run {
            name: format!("cr{cr:.2}"),
            kind: RunKind::Sweep(cr),
        })
        .collect();
    if sweep.cr.is_empty() || sweep.include_optimized {
        out.push(Run {
            name: "optimized".into(),
            kind: RunKind::Optimized,
        });
    }
    out.dedup_by(|a, b| a.name == b.name);
    out
}

pub const SENSITIVITY_CSV: &str = "score/sensitivity.csv";
pub const SCORE_SUMMARY: &str = "score/summary.json";
pub const THRESHOLD_JSON: &str = "optimize/threshold.json";
pub const ITERATIONS_CSV: &str = "optimize/iterations.csv";
pub const REPORT_CSV: &str = "report/summary.csv";
pub const REPORT_JSON: &str = "report/summary.json";

pub fn map_path(run: &str) -> String {
    format!("compress/{run}/bitwidth_map.json")
}
pub fn placement_path(run: &str) -> String {
    format!("place/{run}/placement.csv")
}
pub fn cost_json_path(run: &str) -> String {
    format!("simulate/{run}/cost.json")
}
pub fn cost_csv_path(run: &str) -> String {
    format!("simulate/{run}/cost.csv")
}
pub fn accuracy_path(run: &str) -> String {
    format!("simulate/{run}/accuracy.json")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub strips: usize,
    pub strips_per_layer: BTreeMap<usize, usize>,
    pub score_min: f64,
    pub score_max: f64,
    pub top_strip: String,
    pub calibration_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSplit {
    pub enabled: bool,
    pub mode: AlignMode,
    pub capacity: usize,
    /// Per-layer thresholds after alignment.
    pub layer_thresholds: BTreeMap<usize, f64>,
    pub q: usize,
    pub p_low: usize,
    pub cr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub strips: usize,
    pub threshold: f64,
    pub rank: usize,
    pub loss: f64,
    pub initial_loss: f64,
    pub stop: StopReason,
    pub iterations: usize,
    pub evaluations: usize,
    pub q: usize,
    pub p_low: usize,
    pub cr: f64,
    pub aligned: AlignedSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub float_accuracy: f64,
    #[serde(flatten)]
    pub paths: PathComparison,
}

/// Inputs, output directory and the stage being executed.
pub struct Ctx<'a> {
    pub loaded: &'a Loaded,
    pub out: PathBuf,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Reads an artifact produced by `upstream`.
    fn read(&self, stage: Stage, upstream: Stage, rel: &str) -> Result<String> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|_| CliError::MissingArtifact {
            stage,
            upstream,
            path: p,
        })
    }

    fn calibration(&self, stage: Stage) -> Result<Dataset> {
        let c = &self.loaded.config.calibration;
        self.loaded.train.seeded_subsample(c.samples, c.seed).in_stage(stage)
    }

    fn records(&self, stage: Stage) -> Result<Vec<SensitivityRecord>> {
        let text = self.read(stage, Stage::Score, SENSITIVITY_CSV)?;
        read_sensitivity_csv(text.as_bytes()).map_err(|e| CliError::Inconsistent {
            stage,
            path: self.path(SENSITIVITY_CSV),
            message: e.to_string(),
        })
    }

    pub(crate) fn map(&self, stage: Stage, run: &str) -> Result<BitwidthMap> {
        let rel = map_path(run);
        let text = self.read(stage, Stage::Compress, &rel)?;
        BitwidthMap::from_json(&text).map_err(|e| CliError::Inconsistent {
            stage,
            path: self.path(&rel),
            message: e.to_string(),
        })
    }

    pub(crate) fn json<T: for<'de> Deserialize<'de>>(&self, stage: Stage, upstream: Stage, rel: &str) -> Result<T> {
        let text = self.read(stage, upstream, rel)?;
        serde_json::from_str(&text).map_err(|e| CliError::Inconsistent {
            stage,
            path: self.path(rel),
            message: e.to_string(),
        })
    }

    /// Strips of the original model in sensitivity rank order.
    fn ranked_strips(&self, stage: Stage, records: &[SensitivityRecord]) -> Result<Vec<StripWeight>> {
        let mut by_key: BTreeMap<_, _> = decompose_strips(&self.loaded.model)
            .in_stage(stage)?
            .into_iter()
            .map(|s| (s.key, s))
            .collect();
        let ranked: Vec<StripWeight> = rank_strips(records)
            .iter()
            .filter_map(|r| by_key.remove(&r.key))
            .collect();
        if !by_key.is_empty() || ranked.len() != records.len() {
            return Err(CliError::Inconsistent {
                stage,
                path: self.path(SENSITIVITY_CSV),
                message: "sensitivity records do not match the model's strips".into(),
            });
        }
        Ok(ranked)
    }

    fn placement(&self, stage: Stage, run: &str, records: &[SensitivityRecord]) -> Result<(BitwidthMap, TilePlacement)> {
        let map = self.map(stage, run)?;
        let strips = self.ranked_strips(stage, records)?;
        let placement = place(&map, &strips, &self.loaded.config.hardware).in_stage(stage)?;
        Ok((map, placement))
    }
}

/// Upstream artifact paths a stage reads.
fn upstream_files(loaded: &Loaded, stage: Stage) -> Vec<(Stage, String)> {
    let runs = runs(loaded);
    match stage {
        Stage::Score => vec![],
        Stage::Optimize => vec![(Stage::Score, SENSITIVITY_CSV.into())],
        Stage::Compress => vec![(Stage::Score, SENSITIVITY_CSV.into()), (Stage::Optimize, THRESHOLD_JSON.into())],
        Stage::Place => std::iter::once((Stage::Score, SENSITIVITY_CSV.into()))
            .chain(runs.iter().map(|r| (Stage::Compress, map_path(&r.name))))
            .collect(),
        Stage::Simulate => std::iter::once((Stage::Score, SENSITIVITY_CSV.into()))
            .chain(runs.iter().map(|r| (Stage::Compress, map_path(&r.name))))
            .chain(runs.iter().map(|r| (Stage::Place, placement_path(&r.name))))
            .collect(),
        Stage::Report => runs
            .iter()
            .flat_map(|r| {
                [
                    (Stage::Compress, map_path(&r.name)),
                    (Stage::Simulate, cost_json_path(&r.name)),
                    (Stage::Simulate, accuracy_path(&r.name)),
                ]
            })
            .collect(),
    }
}

/// Hashes of everything `stage` depends on; fails if an upstream artifact
/// is missing.
pub fn stage_inputs(loaded: &Loaded, out: &Path, stage: Stage) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::from([("config".to_string(), loaded.hash.clone())]);
    for (upstream, rel) in upstream_files(loaded, stage) {
        let p = out.join(&rel);
        let h = file_hash(&p).ok_or(CliError::MissingArtifact {
            stage,
            upstream,
            path: p,
        })?;
        inputs.insert(rel, h);
    }
    Ok(inputs)
}

/// Runs one stage unconditionally and returns the files it wrote.
pub fn execute(ctx: &Ctx<'_>, stage: Stage) -> Result<Vec<PathBuf>> {
    match stage {
        Stage::Score => score(ctx),
        Stage::Optimize => optimize(ctx),
        Stage::Compress => compress(ctx),
        Stage::Place => place_stage(ctx),
        Stage::Simulate => simulate(ctx),
        Stage::Report => write_report(ctx, &runs(ctx.loaded)),
    }
}

fn write(stage: Stage, path: PathBuf, text: &str) -> Result<PathBuf> {
    write_text(&path, text).in_stage(stage)?;
    Ok(path)
}

fn json_text<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn score(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let stage = Stage::Score;
    let model = &ctx.loaded.model;
    let calib = ctx.calibration(stage)?;
    let strips = decompose_strips(model).in_stage(stage)?;
    let records = score_strips(model, &calib, &strips, &ctx.loaded.config.hutchinson).in_stage(stage)?;
    let ranked = rank_strips(&records);
    let mut csv = Vec::new();
    write_sensitivity_csv(&mut csv, &records).in_stage(stage)?;

    let mut per_layer = BTreeMap::new();
    for r in &records {
        *per_layer.entry(r.key.layer_id).or_insert(0) += 1;
    }
    let summary = ScoreSummary {
        strips: records.len(),
        strips_per_layer: per_layer,
        score_min: ranked.last().map_or(0.0, |r| r.score),
        score_max: ranked.first().map_or(0.0, |r| r.score),
        top_strip: ranked.first().map(|r| r.key.to_string()).unwrap_or_default(),
        calibration_samples: calib.len(),
    };
    println!(
        "score: R = {} strips, score range [{:e}, {:e}]",
        summary.strips, summary.score_min, summary.score_max
    );
    let csv_path = ctx.path(SENSITIVITY_CSV);
    write_bytes(&csv_path, &csv).in_stage(stage)?;
    Ok(vec![csv_path, write(stage, ctx.path(SCORE_SUMMARY), &json_text(&summary))?])
}

/// The optimized run's clusters: the optimizer's threshold, then alignment.
fn optimized_map(ctx: &Ctx<'_>, stage: Stage, records: &[SensitivityRecord], threshold: f64) -> Result<BitwidthMap> {
    let cfg = &ctx.loaded.config;
    if cfg.alignment.enabled {
        aligned_map(records, threshold, cfg.hardware.high_capacity(), cfg.alignment.mode).in_stage(stage)
    } else {
        assign_clusters(records, threshold).in_stage(stage)
    }
}

fn optimize(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let stage = Stage::Optimize;
    let cfg = &ctx.loaded.config;
    let records = ctx.records(stage)?;
    let calib = ctx.calibration(stage)?;
    let res = optimize_threshold(&ctx.loaded.model, &records, &calib, &cfg.optimizer).in_stage(stage)?;
    let raw = assign_clusters(&records, res.threshold).in_stage(stage)?;
    let aligned = optimized_map(ctx, stage, &records, res.threshold)?;
    let cap = cfg.hardware.high_capacity().c;
    if cfg.alignment.enabled {
        let misaligned = match cfg.alignment.mode {
            AlignMode::PerLayer => aligned.layer_thresholds.keys().find(|&&l| aligned.layer_q(l) % cap != 0).copied(),
            AlignMode::Global => (aligned.q() % cap != 0).then_some(0),
        };
        if let Some(layer) = misaligned {
            return Err(CliError::Inconsistent {
                stage,
                path: ctx.path(THRESHOLD_JSON),
                message: format!("layer {layer}: aligned 8-bit count is not a multiple of {cap}"),
            });
        }
    }
    let report = ThresholdReport {
        strips: records.len(),
        threshold: res.threshold,
        rank: res.rank,
        loss: res.loss,
        initial_loss: res.initial_loss,
        stop: res.stop,
        iterations: res.log.len(),
        evaluations: res.evaluations,
        q: raw.q(),
        p_low: raw.p_low(),
        cr: compression_ratio(&raw),
        aligned: AlignedSplit {
            enabled: cfg.alignment.enabled,
            mode: cfg.alignment.mode,
            capacity: cap,
            layer_thresholds: aligned.layer_thresholds.clone(),
            q: aligned.q(),
            p_low: aligned.p_low(),
            cr: compression_ratio(&aligned),
        },
    };
    println!(
        "optimize: T* = {:e} (rank {}), L = {:e}, stop = {:?}, CR = {:.4}, aligned CR = {:.4}",
        report.threshold, report.rank, report.loss, report.stop, report.cr, report.aligned.cr
    );
    let mut log = Vec::new();
    write_iteration_csv(&mut log, &res.log).in_stage(stage)?;
    let log_path = ctx.path(ITERATIONS_CSV);
    write_bytes(&log_path, &log).in_stage(stage)?;
    Ok(vec![write(stage, ctx.path(THRESHOLD_JSON), &json_text(&report))?, log_path])
}

fn compress(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let stage = Stage::Compress;
    let records = ctx.records(stage)?;
    let opt: ThresholdReport = ctx.json(stage, Stage::Optimize, THRESHOLD_JSON)?;
    let scale = RankScale::new(&records).in_stage(stage)?;
    let mut written = Vec::new();
    for run in runs(ctx.loaded) {
        let map = match run.kind {
            RunKind::Optimized => optimized_map(ctx, stage, &records, opt.threshold)?,
            RunKind::Sweep(cr) => {
                let rank = (cr * records.len() as f64).round() as usize;
                assign_clusters(&records, scale.threshold(rank)).in_stage(stage)?
            }
        };
        let (compressed, map) = compress_with_map(&ctx.loaded.model, map).in_stage(stage)?;
        println!(
            "compress: {} q = {}, p_low = {}, CR = {:.4}",
            run.name,
            map.q(),
            map.p_low(),
            compression_ratio(&map)
        );
        written.push(write(stage, ctx.path(&map_path(&run.name)), &(map.to_json() + "\n"))?);
        written.extend(write_model(&ctx.path(&format!("compress/{}/model", run.name)), &compressed).in_stage(stage)?);
    }
    Ok(written)
}

fn place_stage(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let stage = Stage::Place;
    let records = ctx.records(stage)?;
    let mut written = Vec::new();
    for run in runs(ctx.loaded) {
        let (_, placement) = ctx.placement(stage, &run.name, &records)?;
        let mut csv = Vec::new();
        write_placement_csv(&mut csv, &placement).in_stage(stage)?;
        let p = ctx.path(&placement_path(&run.name));
        write_bytes(&p, &csv).in_stage(stage)?;
        println!(
            "place: {} tiles 8-bit = {}, 4-bit = {}",
            run.name,
            placement.tile_count(8),
            placement.tile_count(4)
        );
        written.push(p);
    }
    Ok(written)
}

fn simulate(ctx: &Ctx<'_>) -> Result<Vec<PathBuf>> {
    let stage = Stage::Simulate;
    let loaded = ctx.loaded;
    let hw = &loaded.config.hardware;
    let records = ctx.records(stage)?;
    let workload = Workload::for_model(&loaded.model, loaded.eval.len() as u64).in_stage(stage)?;
    let float_accuracy = loaded.model.accuracy(&loaded.eval).in_stage(stage)?;
    let mut written = Vec::new();
    for run in runs(loaded) {
        let (map, placement) = ctx.placement(stage, &run.name, &records)?;
        let rel = placement_path(&run.name);
        let stored = fs::read(ctx.path(&rel)).map_err(|_| CliError::MissingArtifact {
            stage,
            upstream: Stage::Place,
            path: ctx.path(&rel),
        })?;
        let mut expected = Vec::new();
        write_placement_csv(&mut expected, &placement).in_stage(stage)?;
        if stored != expected {
            return Err(CliError::Inconsistent {
                stage,
                path: ctx.path(&rel),
                message: "placement differs from the one implied by the bitwidth map".into(),
            });
        }
        let compressed = apply_map(&loaded.model, &map).in_stage(stage)?;
        let cost: CostReport = simulate_cost(&placement, &workload, hw).in_stage(stage)?;
        let paths = compare_paths(&loaded.model, &compressed, &placement, &map, hw, &loaded.eval).in_stage(stage)?;
        println!(
            "simulate: {} accuracy = {:.4} (reference {:.4}), energy = {:e} J, ADC share = {:.3}",
            run.name,
            paths.crossbar_accuracy,
            paths.reference_accuracy,
            cost.total.energy_total,
            cost.total.adc_share()
        );
        let mut csv = Vec::new();
        write_cost_csv(&mut csv, &cost).in_stage(stage)?;
        let csv_path = ctx.path(&cost_csv_path(&run.name));
        write_bytes(&csv_path, &csv).in_stage(stage)?;
        written.push(write(stage, ctx.path(&cost_json_path(&run.name)), &(cost.to_json() + "\n"))?);
        written.push(csv_path);
        let acc = AccuracyReport {
            float_accuracy,
            paths,
        };
        written.push(write(stage, ctx.path(&accuracy_path(&run.name)), &json_text(&acc))?);
    }
    Ok(written)
}

/// Runs `stages` in order. With `force` unset, a stage whose inputs and
/// outputs match the manifest is skipped. Returns the stages that executed.
pub fn run_stages(loaded: &Loaded, stages: &[Stage], force: bool) -> Result<Vec<Stage>> {
    let out = loaded.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::Stage {
        stage: stages.first().copied().unwrap_or(Stage::Score),
        source: cimq_core::CimError::io(&out, e),
    })?;
    let mut manifest = RunManifest::open(&out, &loaded.hash);
    let ctx = Ctx {
        loaded,
        out: out.clone(),
    };
    let mut executed = Vec::new();
    for &stage in stages {
        let inputs = stage_inputs(loaded, &out, stage)?;
        if !force && manifest.up_to_date(&out, stage.name(), &inputs) {
            eprintln!("{stage}: up to date");
            continue;
        }
        let start = Instant::now();
        let outputs = execute(&ctx, stage)?;
        manifest.record(&out, stage.name(), inputs, &outputs);
        manifest.save(&out).in_stage(stage)?;
        eprintln!("{stage}: {:.2}s, {} artifacts", start.elapsed().as_secs_f64(), outputs.len());
        executed.push(stage);
    }
    Ok(executed)
}
