//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cimq::report::ReportRow;
use cimq::stages::SENSITIVITY_CSV;
use cimq::{Overrides, Stage};
use cimq_core::crossbar::{mixed_mvm, mixed_mvm_int, place, utilization, HardwareConfig};
use cimq_core::quant::{assign_clusters, compress_with_map, dequantize, quantize_activation, Cluster, HIGH_BITS};
use cimq_core::strips::{
    conv_layers, decompose_strips, group_trace, group_trace_with, read_sensitivity_csv, HutchinsonConfig,
    SensitivityRecord, StripKey,
};
use cimq_core::tensor::{grad_flat, Dataset, Layer, ModelGraph, NamedTensors, Quadratic};
use cimq_core::threshold::{aligned_map, optimize_threshold, AlignMode, DriftEvaluator, ThresholdOptConfig};
use cimq_core::Tensor;
use common::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, scale: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

/// conv(k×k, d→n) → relu → dense classifier.
fn conv_net(k: usize, d: usize, n: usize, side: usize, stride: usize, pad: usize, r: &mut ChaCha8Rng) -> ModelGraph {
    let out = (side + 2 * pad - k) / stride + 1;
    let mut params = NamedTensors::new();
    params.insert("c.k".into(), random_tensor(vec![k, k, d, n], 1.0, r));
    params.insert("fc.w".into(), random_tensor(vec![n * out * out, 2], 1.0, r));
    let layers = vec![
        Layer::Conv2d {
            name: "c".into(),
            kernel: "c.k".into(),
            bias: None,
            stride,
            pad,
        },
        Layer::Relu,
        Layer::Dense {
            name: "fc".into(),
            weight: "fc.w".into(),
            bias: None,
        },
    ];
    ModelGraph::new(vec![d, side, side], 2, layers, params).unwrap()
}

fn records_from(model: &ModelGraph, scores: &[f64]) -> Vec<SensitivityRecord> {
    decompose_strips(model)
        .unwrap()
        .iter()
        .zip(scores)
        .map(|(s, &score)| SensitivityRecord::new(s.key, s.p_strip(), 2.0 * score * s.p_strip() as f64, 1.0))
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

const LAYERS: usize = 200;
const ACTIVATIONS_PER_LAYER: usize = 50;

/// Integer and real-valued outputs of one layer, summed strip by strip from
/// the codes and from the dequantized compressed kernel.
fn scalar_oracle(
    model: &ModelGraph,
    compressed: &ModelGraph,
    map: &cimq_core::quant::BitwidthMap,
    act: &Tensor,
) -> (Vec<i64>, Vec<f64>) {
    let layer = &conv_layers(model)[0];
    let kernel = compressed.param(&layer.kernel).unwrap().data();
    let (spec, a) = quantize_activation(act.data());
    let a_deq: Vec<f64> = a.iter().map(|&c| dequantize(c, &spec)).collect();
    let (d, h, w) = (act.shape()[0], act.shape()[1], act.shape()[2]);
    let ho = (h + 2 * layer.pad - layer.ksize) / layer.stride + 1;
    let wo = (w + 2 * layer.pad - layer.ksize) / layer.stride + 1;
    let k = map.scales_for(layer.layer_id).unwrap().k;
    let mut z = vec![0i64; layer.out_channels * ho * wo];
    let mut y = vec![0f64; z.len()];
    for s in decompose_strips(model).unwrap() {
        let (cluster, codes) = map.strip_codes(&s).unwrap();
        let shift = if cluster == Cluster::Low { 1i64 << k } else { 1 };
        let StripKey { m, n, out_channel: o, .. } = s.key;
        for oi in 0..ho {
            for oj in 0..wo {
                let i = (oi * layer.stride + m) as isize - layer.pad as isize;
                let j = (oj * layer.stride + n) as isize - layer.pad as isize;
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    continue;
                }
                let out = (o * ho + oi) * wo + oj;
                for c in 0..d {
                    let at = (c * h + i as usize) * w + j as usize;
                    z[out] += shift * i64::from(codes[c]) * i64::from(a[at]);
                    y[out] += kernel[s.flat_indices[c]] * a_deq[at];
                }
            }
        }
    }
    (z, y)
}

fn mixed_precision_exactness() -> Outcome {
    let hw = HardwareConfig::default();
    let mut r = rng(0xacc1);
    let (mut cases, mut worst, mut banded) = (0usize, 0f64, 0usize);
    for layer_i in 0..LAYERS {
        let k = *[1usize, 3].choose(&mut r).unwrap();
        // every tenth layer is deeper than one array so strips split into bands
        let d = if layer_i % 10 == 0 { r.random_range(129..=160) } else { r.random_range(1..=40) };
        let n = r.random_range(1..=40);
        let side = r.random_range(k.max(2)..=5);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let model = conv_net(k, d, n, side, stride, pad, &mut r);
        let high_frac: f64 = r.random_range(0.0..=1.0);
        let strips = decompose_strips(&model).unwrap();
        let scores: Vec<f64> = strips.iter().map(|_| if r.random_bool(high_frac) { 1.0 } else { -1.0 }).collect();
        let clusters = assign_clusters(&records_from(&model, &scores), 0.0).unwrap();
        let (compressed, map) = compress_with_map(&model, clusters).unwrap();
        let placement = place(&map, &strips, &hw).unwrap();
        let layer = &conv_layers(&model)[0];
        banded += usize::from(d > hw.array_rows);
        for _ in 0..ACTIVATIONS_PER_LAYER {
            let scale = r.random_range(0.1..4.0);
            let act = random_tensor(vec![d, side, side], scale, &mut r);
            let (z_want, y_want) = scalar_oracle(&model, &compressed, &map, &act);
            let int = mixed_mvm_int(&placement, layer, &act, &map, &hw).unwrap();
            let z: Vec<i64> = int.z.iter().map(|&v| i64::from(v)).collect();
            ensure!(z == z_want, "layer {layer_i}: integer outputs differ from the oracle");
            let y = mixed_mvm(&placement, layer, &act, &map, &hw).unwrap();
            for (a, b) in y.data().iter().zip(&y_want) {
                let err = (a - b).abs() / b.abs().max(1.0);
                worst = worst.max(err);
                ensure!(err <= 1e-9, "layer {layer_i}: scaled output {a} vs {b}");
            }
            cases += 1;
        }
    }
    ensure!(cases >= 10_000, "only {cases} cases");
    Ok(format!(
        "{cases} cases over {LAYERS} layers ({banded} split into row bands); integer mismatches 0, max scaled error {worst:.1e}"
    ))
}

fn mlp(r: &mut ChaCha8Rng) -> ModelGraph {
    let mut params = NamedTensors::new();
    params.insert("l1.w".into(), random_tensor(vec![6, 12], 1.0, r));
    params.insert("l1.b".into(), random_tensor(vec![12], 0.5, r));
    params.insert("l2.w".into(), random_tensor(vec![12, 4], 1.0, r));
    params.insert("l2.b".into(), random_tensor(vec![4], 0.5, r));
    let dense = |name: &str| Layer::Dense {
        name: name.into(),
        weight: format!("{name}.w"),
        bias: Some(format!("{name}.b")),
    };
    ModelGraph::new(vec![6], 4, vec![dense("l1"), Layer::Relu, dense("l2")], params).unwrap()
}

/// Trace of the Hessian block on `group`, one central difference of exact
/// gradients per column.
fn dense_block_trace(model: &ModelGraph, batch: &Dataset, group: &[usize]) -> f64 {
    let w = model.flat_params();
    let h = 1e-5;
    group
        .iter()
        .map(|&j| {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[j] += h;
            m[j] -= h;
            let gp = grad_flat(model, &p, batch).unwrap().1;
            let gm = grad_flat(model, &m, batch).unwrap().1;
            (gp[j] - gm[j]) / (2.0 * h)
        })
        .sum()
}

fn hessian_machinery() -> Outcome {
    let mut r = rng(0xacc2);
    let model = mlp(&mut r);
    let p = model.param_count();
    ensure!(p <= 200, "{p} parameters");
    let x = random_tensor(vec![48, 6], 1.0, &mut r);
    let labels = (0..48).map(|_| r.random_range(0..4)).collect();
    let batch = Dataset::new(x, labels, 4).unwrap();

    // a strip is the fan-in of one unit: a column of the weight matrix
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (name, bias) in [("l1.w", "l1.b"), ("l2.w", "l2.b")] {
        let slot = model.slot(name).unwrap();
        let (rows, cols) = (slot.shape[0], slot.shape[1]);
        for c in 0..cols {
            groups.push((0..rows).map(|i| slot.offset + i * cols + c).collect());
        }
        let b = model.slot(bias).unwrap();
        groups.push((b.offset..b.offset + b.len).collect());
    }
    let cfg = HutchinsonConfig {
        m: 100,
        seed: 0xacc2,
        eps: None,
    };
    let mut worst = 0f64;
    for g in &groups {
        let est = group_trace(&model, &batch, g, &cfg).unwrap();
        let exact = dense_block_trace(&model, &batch, g);
        let err = if exact == 0.0 { est.abs() } else { rel_err(est, exact) };
        worst = worst.max(err);
        ensure!(err <= 0.10, "group starting at {}: {est} vs {exact}", g[0]);
    }

    let mut diag_worst = 0f64;
    for case in 0..200 {
        let dim = r.random_range(1..=16);
        let diag: Vec<f64> = (0..dim).map(|_| r.random_range(-5.0..5.0)).collect();
        let point: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let q = Quadratic::diagonal(&diag, point).unwrap();
        let group: Vec<usize> = (0..dim).collect();
        // a quadratic has no truncation error, so a unit step keeps the
        // difference quotient free of cancellation
        let t = group_trace_with(&q, &group, 1, case, 0, 1.0).unwrap();
        let want: f64 = diag.iter().sum();
        let err = (t - want).abs() / want.abs().max(1.0);
        diag_worst = diag_worst.max(err);
        ensure!(err <= 1e-12, "diagonal case {case}: {t} vs {want}");
    }
    Ok(format!(
        "{p}-parameter MLP, {} strip groups at m = 100, worst relative error {:.1}%; 200 diagonal cases at m = 1, worst {diag_worst:.1e}",
        groups.len(),
        100.0 * worst
    ))
}

fn threshold_fidelity(fixtures: &[(String, PathBuf)]) -> Outcome {
    let cfg = ThresholdOptConfig::default();
    let mut lines = Vec::new();
    for (name, config) in fixtures {
        let loaded = cimq::config::load(config, &Overrides::default()).unwrap();
        let csv = std::fs::read(loaded.out_dir.join(SENSITIVITY_CSV)).unwrap();
        let records = read_sensitivity_csv(csv.as_slice()).unwrap();
        ensure!(records.len() <= 64, "{name}: {} strips", records.len());
        let c = &loaded.config.calibration;
        let calib = loaded.train.seeded_subsample(c.samples, c.seed).unwrap();

        let result = optimize_threshold(&loaded.model, &records, &calib, &cfg).unwrap();
        let mut eval = DriftEvaluator::new(&loaded.model, &records, &calib).unwrap();
        let thresholds = eval.scale().distinct_thresholds();
        let global = thresholds
            .iter()
            .map(|&(_, t)| eval.loss_at_threshold(t).unwrap())
            .fold(f64::INFINITY, f64::min);

        ensure!(
            (result.loss - global).abs() <= 0.05 * global,
            "{name}: L = {} vs sweep minimum {global}",
            result.loss
        );
        ensure!(result.log.len() <= 50, "{name}: {} iterations", result.log.len());
        ensure!(
            result.log.windows(2).all(|w| w[1].best_l <= w[0].best_l),
            "{name}: best-so-far trace increases"
        );
        lines.push(format!(
            "{name}: L {:.3e} vs min {global:.3e} over {} partitions, {} iterations",
            result.loss,
            thresholds.len(),
            result.log.len()
        ));
    }
    Ok(lines.join("; "))
}

fn capacity_alignment() -> Outcome {
    let hw = HardwareConfig::default();
    let cap = hw.high_capacity();
    let c = cap.c;
    let mut r = rng(0xacc4);
    let mut gain = 0f64;
    for set in 0..100 {
        let k = *[1usize, 3].choose(&mut r).unwrap();
        let d = r.random_range(1..=hw.array_rows);
        let n = r.random_range((c / (k * k)).max(1) + 1..=300 / (k * k));
        let model = conv_net(k, d, n, k + 1, 1, 0, &mut r);
        let strips = decompose_strips(&model).unwrap();
        let total = strips.len();
        let mut scores: Vec<f64> = (0..total).map(|i| i as f64).collect();
        scores.shuffle(&mut r);
        let records = records_from(&model, &scores);
        let q = loop {
            let q = r.random_range(c + 1..=total);
            if q % c != 0 {
                break q;
            }
        };
        // exactly q strips score above t
        let t = (total - q) as f64 - 0.5;

        let unaligned = compress_with_map(&model, assign_clusters(&records, t).unwrap()).unwrap().1;
        let aligned = compress_with_map(&model, aligned_map(&records, t, cap, AlignMode::PerLayer).unwrap()).unwrap().1;
        ensure!(unaligned.q() == q, "set {set}: q = {}", unaligned.q());
        ensure!(aligned.q() % c == 0, "set {set}: q' = {} with C = {c}", aligned.q());
        let u0 = utilization(&place(&unaligned, &strips, &hw).unwrap(), HIGH_BITS);
        let u1 = utilization(&place(&aligned, &strips, &hw).unwrap(), HIGH_BITS);
        ensure!(u1 > u0, "set {set}: aligned {u1:.2}% vs unaligned {u0:.2}%");
        gain += u1 - u0;
    }

    let model = conv_net(1, 128, 32, 1, 1, 0, &mut r);
    let strips = decompose_strips(&model).unwrap();
    let all_high = assign_clusters(&records_from(&model, &vec![1.0; 32]), 0.0).unwrap();
    let map = compress_with_map(&model, all_high).unwrap().1;
    let exact = utilization(&place(&map, &strips, &hw).unwrap(), HIGH_BITS);
    ensure!(format!("{exact:.2}") == "100.00", "exact fit gives {exact:.2}%");
    Ok(format!(
        "100 sets, mean 8-bit utilization gain {:+.2} points; exact fit {exact:.2}%",
        gain / 100.0
    ))
}

/// Two independent fixture directories run through the whole pipeline with
/// the same config.
struct PipelinePair {
    configs: [PathBuf; 2],
    _dirs: [tempfile::TempDir; 2],
}

const ENERGY_CRS: [f64; 5] = [0.0, 0.1, 0.5, 0.7, 1.0];

impl PipelinePair {
    fn run() -> Self {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let configs = [0, 1].map(|i| {
            let config = fixture(dirs[i].path(), 0, false);
            sweep(&config, &ENERGY_CRS, true);
            run_pipeline(&config, &[]);
            config
        });
        PipelinePair { configs, _dirs: dirs }
    }

    fn rows(&self) -> Vec<ReportRow> {
        cimq::report::read_rows(&out_dir(&self.configs[0])).unwrap()
    }
}

fn row<'a>(rows: &'a [ReportRow], run: &str) -> &'a ReportRow {
    rows.iter().find(|r| r.run == run).unwrap_or_else(|| panic!("no run {run}"))
}

fn energy_trend(pair: &PipelinePair) -> Outcome {
    let rows = pair.rows();
    let sweep: Vec<&ReportRow> = ENERGY_CRS.iter().map(|cr| row(&rows, &format!("cr{cr:.2}"))).collect();
    let shares: Vec<String> = sweep
        .iter()
        .map(|r| format!("{:.2}: {:.1}%", r.cr, 100.0 * r.adc_share))
        .collect();
    let detail = format!("ADC share by CR [{}]", shares.join(", "));
    for w in sweep.windows(2) {
        ensure!(
            w[1].energy_total < w[0].energy_total,
            "energy rises from CR {:.2} to {:.2}; {detail}",
            w[0].cr,
            w[1].cr
        );
    }
    for r in &sweep {
        ensure!(r.adc_share >= 0.90, "ADC share below 90% at CR {:.2}; {detail}", r.cr);
    }
    Ok(format!("energy strictly decreasing; {detail}"))
}

fn toy_pipeline(pair: &PipelinePair) -> Outcome {
    let rows = pair.rows();
    let (base, half) = (row(&rows, "cr0.00"), row(&rows, "cr0.50"));
    let drop = 100.0 * (base.accuracy - half.accuracy);
    ensure!(drop.abs() <= 5.0, "accuracy {:.2}% vs 8-bit {:.2}%", 100.0 * half.accuracy, 100.0 * base.accuracy);
    ensure!(half.energy_total < base.energy_total, "energy {} vs {}", half.energy_total, base.energy_total);
    Ok(format!(
        "8-bit {:.2}%, CR 0.50 {:.2}%, energy {:.1}% lower",
        100.0 * base.accuracy,
        100.0 * half.accuracy,
        100.0 * (1.0 - half.energy_total / base.energy_total)
    ))
}

fn determinism(pair: &PipelinePair) -> Outcome {
    let [a, b] = pair.configs.each_ref().map(|c| tree_hashes(&out_dir(c)));
    ensure!(!a.is_empty(), "empty artifact tree");
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    ensure!(a.len() == b.len() && differing.is_empty(), "trees differ at {differing:?}");
    Ok(format!("{} artifacts, identical SHA-256", a.len()))
}

fn rigged_fixture_scored(dir: &Path, seed: u64) -> PathBuf {
    let config = fixture(dir, seed, true);
    cimq::run_stage(&config, &Overrides::default(), Stage::Score).unwrap();
    config
}

fn need(p: &std::thread::Result<PipelinePair>) -> Result<&PipelinePair, String> {
    p.as_ref().map_err(|_| "toy pipeline failed".to_string())
}

fn check(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {id} [{tag}] {name} ({secs:.1}s): {detail}");
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= check(1, "mixed-precision exactness", mixed_precision_exactness);
    ok &= check(2, "Hessian trace estimation", hessian_machinery);

    let pair = catch_unwind(PipelinePair::run);
    let rigged = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    ok &= check(3, "threshold descent vs exhaustive sweep", || {
        let pair = need(&pair)?;
        let mut fixtures = vec![("toy".to_string(), pair.configs[0].clone())];
        for (seed, dir) in rigged.iter().enumerate() {
            fixtures.push((format!("rigged seed {seed}"), rigged_fixture_scored(dir.path(), seed as u64)));
        }
        threshold_fidelity(&fixtures)
    });
    ok &= check(4, "capacity alignment", capacity_alignment);
    ok &= check(5, "energy breakdown and trend", || energy_trend(need(&pair)?));
    ok &= check(6, "toy pipeline accuracy vs energy", || toy_pipeline(need(&pair)?));
    ok &= check(7, "determinism", || determinism(need(&pair)?));

    if !ok {
        std::process::exit(1);
    }
}
