//! Strip-weight decomposition and Hessian-trace sensitivity scoring.
//!
//! A `K×K×D×N` convolution kernel is viewed as `K·K·N` strips, each the
//! `1×1×D` column `kernel[m][n][..][o]`. A strip's score is
//! `trace(H_strip) / (2·D) · ‖w_strip‖²`, where `H_strip` is the block of the
//! loss Hessian restricted to the strip's parameters and its trace is
//! estimated with Rademacher probes masked to that block.

use std::cmp::Ordering;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::tensor::{default_hvp_eps, hvp_flat, Dataset, Layer, ModelGraph, ModelLoss, Objective, Tensor};

/// Structural identity of a strip. The derived ordering
/// `(layer_id, out_channel, m, n)` is the canonical structural order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StripKey {
    pub layer_id: usize,
    pub out_channel: usize,
    pub m: usize,
    pub n: usize,
}

impl StripKey {
    /// Probe-stream id; distinct for every key with coordinates below 2^16.
    fn stream(&self) -> u64 {
        ((self.layer_id as u64) << 48)
            | ((self.out_channel as u64 & 0xffff) << 32)
            | ((self.m as u64 & 0xffff) << 16)
            | (self.n as u64 & 0xffff)
    }
}

impl std::fmt::Display for StripKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "layer {} pos ({}, {}) channel {}",
            self.layer_id, self.m, self.n, self.out_channel
        )
    }
}

/// A `1×1×D` slice of a convolution kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct StripWeight {
    pub key: StripKey,
    pub values: Vec<f64>,
    /// Positions of `values` in the model's flat parameter vector.
    pub flat_indices: Vec<usize>,
}

impl StripWeight {
    pub fn p_strip(&self) -> usize {
        self.values.len()
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Kernel geometry of a convolution layer that owns strips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerInfo {
    pub layer_id: usize,
    pub kernel: String,
    pub ksize: usize,
    pub depth: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayerInfo {
    pub fn strip_count(&self) -> usize {
        self.ksize * self.ksize * self.out_channels
    }

    /// Index of `kernel[m][n][d][o]` in the row-major kernel buffer.
    pub fn kernel_index(&self, m: usize, n: usize, d: usize, o: usize) -> usize {
        ((m * self.ksize + n) * self.depth + d) * self.out_channels + o
    }
}

/// Convolution layers of a model in layer order.
pub fn conv_layers(model: &ModelGraph) -> Vec<ConvLayerInfo> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(layer_id, layer)| match layer {
            Layer::Conv2d {
                kernel, stride, pad, ..
            } => {
                let shape = model.param(kernel)?.shape();
                Some(ConvLayerInfo {
                    layer_id,
                    kernel: kernel.clone(),
                    ksize: shape[0],
                    depth: shape[2],
                    out_channels: shape[3],
                    stride: *stride,
                    pad: *pad,
                })
            }
            _ => None,
        })
        .collect()
}

/// Splits every convolution kernel into strips, in structural order.
/// Non-convolution layers contribute nothing.
pub fn decompose_strips(model: &ModelGraph) -> Result<Vec<StripWeight>> {
    let layers = conv_layers(model);
    if layers.is_empty() {
        return Err(CimError::Argument("model has no convolution layer".into()));
    }
    let mut strips = Vec::new();
    for info in &layers {
        let kernel = model.param(&info.kernel).expect("validated at construction");
        let base = model.slot(&info.kernel).expect("validated at construction").offset;
        for o in 0..info.out_channels {
            for m in 0..info.ksize {
                for n in 0..info.ksize {
                    let idx: Vec<usize> = (0..info.depth).map(|d| info.kernel_index(m, n, d, o)).collect();
                    strips.push(StripWeight {
                        key: StripKey {
                            layer_id: info.layer_id,
                            out_channel: o,
                            m,
                            n,
                        },
                        values: idx.iter().map(|&i| kernel.data()[i]).collect(),
                        flat_indices: idx.iter().map(|&i| base + i).collect(),
                    });
                }
            }
        }
    }
    Ok(strips)
}

/// Rebuilds a layer's `K×K×D×N` kernel from its strips.
pub fn reassemble_kernel(info: &ConvLayerInfo, strips: &[StripWeight]) -> Result<Tensor> {
    let mut data = vec![0.0; info.ksize * info.ksize * info.depth * info.out_channels];
    let mut seen = vec![false; info.strip_count()];
    for s in strips.iter().filter(|s| s.key.layer_id == info.layer_id) {
        let k = s.key;
        if k.m >= info.ksize || k.n >= info.ksize || k.out_channel >= info.out_channels {
            return Err(CimError::Argument(format!("strip {k} outside kernel geometry")));
        }
        if s.values.len() != info.depth {
            return Err(CimError::dim(format!("strip {k} length"), info.depth, s.values.len()));
        }
        seen[(k.out_channel * info.ksize + k.m) * info.ksize + k.n] = true;
        for (d, v) in s.values.iter().enumerate() {
            data[info.kernel_index(k.m, k.n, d, k.out_channel)] = *v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(CimError::Argument(format!(
            "layer {} is missing strip #{missing}",
            info.layer_id
        )));
    }
    Tensor::new(vec![info.ksize, info.ksize, info.depth, info.out_channels], data)
}

/// Hutchinson estimator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HutchinsonConfig {
    /// Probe count per group.
    pub m: usize,
    pub seed: u64,
    /// HVP step; `None` selects [`default_hvp_eps`].
    pub eps: Option<f64>,
}

impl Default for HutchinsonConfig {
    fn default() -> Self {
        HutchinsonConfig {
            m: 32,
            seed: 0,
            eps: None,
        }
    }
}

impl HutchinsonConfig {
    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(CimError::Argument("Hutchinson probe count m must be >= 1".into()));
        }
        Ok(())
    }
}

/// `(1/m) Σ vᵢᵀ H vᵢ` with Rademacher `vᵢ` supported on `group`, for the
/// cross-entropy Hessian of `model` on `batch`.
pub fn group_trace(model: &ModelGraph, batch: &Dataset, group: &[usize], cfg: &HutchinsonConfig) -> Result<f64> {
    let eps = cfg.eps.unwrap_or_else(|| default_hvp_eps(model));
    group_trace_with(&ModelLoss::new(model, batch), group, cfg.m, cfg.seed, 0, eps)
}

/// Group-masked Hutchinson trace for any objective. `stream` selects an
/// independent probe sequence under the same seed.
pub fn group_trace_with(
    objective: &dyn Objective,
    group: &[usize],
    m: usize,
    seed: u64,
    stream: u64,
    eps: f64,
) -> Result<f64> {
    if group.is_empty() {
        return Err(CimError::Argument("Hutchinson group must be nonempty".into()));
    }
    if m == 0 {
        return Err(CimError::Argument("Hutchinson probe count m must be >= 1".into()));
    }
    let w = objective.params();
    if let Some(bad) = group.iter().find(|&&i| i >= w.len()) {
        return Err(CimError::Argument(format!("group index {bad} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut v = vec![0.0; w.len()];
    let mut total = 0.0;
    for _ in 0..m {
        for &i in group {
            v[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let hv = hvp_flat(objective, &w, &v, eps)?;
        total += group.iter().map(|&i| v[i] * hv[i]).sum::<f64>();
    }
    Ok(total / m as f64)
}

/// Sensitivity of one strip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub key: StripKey,
    pub p_strip: usize,
    pub trace: f64,
    pub sq_norm: f64,
    pub score: f64,
}

impl SensitivityRecord {
    pub fn new(key: StripKey, p_strip: usize, trace: f64, sq_norm: f64) -> Self {
        SensitivityRecord {
            key,
            p_strip,
            trace,
            sq_norm,
            score: sensitivity_score(trace, p_strip, sq_norm),
        }
    }
}

/// `trace / (2·p) · ‖w‖²`.
pub fn sensitivity_score(trace: f64, p_strip: usize, sq_norm: f64) -> f64 {
    trace / (2.0 * p_strip as f64) * sq_norm
}

/// Scores every strip. Each strip draws probes from its own stream, keyed by
/// its identity, so the result does not depend on list order or scheduling.
pub fn score_strips(
    model: &ModelGraph,
    batch: &Dataset,
    strips: &[StripWeight],
    cfg: &HutchinsonConfig,
) -> Result<Vec<SensitivityRecord>> {
    cfg.validate()?;
    let eps = cfg.eps.unwrap_or_else(|| default_hvp_eps(model));
    let objective = ModelLoss::new(model, batch);
    strips
        .par_iter()
        .map(|s| {
            let trace = group_trace_with(&objective, &s.flat_indices, cfg.m, cfg.seed, s.key.stream(), eps)
                .map_err(|e| CimError::Strip {
                    strip: s.key.to_string(),
                    source: Box::new(e),
                })?;
            Ok(SensitivityRecord::new(s.key, s.p_strip(), trace, s.sq_norm()))
        })
        .collect()
}

/// Descending score; ties in structural order. NaN scores sort last.
pub fn rank_cmp(a: &SensitivityRecord, b: &SensitivityRecord) -> Ordering {
    match (a.score.is_nan(), b.score.is_nan()) {
        (false, true) => Ordering::Less,
        (true, false) => Ordering::Greater,
        _ => b.score.total_cmp(&a.score).then(a.key.cmp(&b.key)),
    }
}

pub fn rank_strips(records: &[SensitivityRecord]) -> Vec<SensitivityRecord> {
    let mut out = records.to_vec();
    out.sort_by(rank_cmp);
    out
}

/// Positions of `records` in ranked order.
pub fn rank_order(records: &[SensitivityRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&a, &b| rank_cmp(&records[a], &records[b]));
    idx
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    layer_id: usize,
    m: usize,
    n: usize,
    out_channel: usize,
    p_strip: usize,
    trace: f64,
    sq_norm: f64,
    score: f64,
}

/// Writes the ranked sensitivity report.
pub fn write_sensitivity_csv<W: Write>(out: W, records: &[SensitivityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rank_strips(records) {
        w.serialize(CsvRow {
            layer_id: r.key.layer_id,
            m: r.key.m,
            n: r.key.n,
            out_channel: r.key.out_channel,
            p_strip: r.p_strip,
            trace: r.trace,
            sq_norm: r.sq_norm,
            score: r.score,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CimError::io("sensitivity report", e))
}

pub fn read_sensitivity_csv<R: Read>(input: R) -> Result<Vec<SensitivityRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(SensitivityRecord {
                key: StripKey {
                    layer_id: row.layer_id,
                    out_channel: row.out_channel,
                    m: row.m,
                    n: row.n,
                },
                p_strip: row.p_strip,
                trace: row.trace,
                sq_norm: row.sq_norm,
                score: row.score,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> CimError {
    let offset = e.position().map(|p| p.byte()).unwrap_or(0);
    CimError::Format {
        path: "sensitivity csv".into(),
        offset,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{NamedTensors, Quadratic};

    fn conv_model(k: usize, d: usize, n: usize) -> ModelGraph {
        let mut p = NamedTensors::new();
        let len = k * k * d * n;
        p.insert(
            "c.k".into(),
            Tensor::new(vec![k, k, d, n], (0..len).map(|i| i as f64 * 0.01 - 0.3).collect()).unwrap(),
        );
        let flat = n * (4 - k + 1) * (4 - k + 1);
        p.insert("fc.w".into(), Tensor::new(vec![flat, 2], vec![0.1; flat * 2]).unwrap());
        ModelGraph::new(
            vec![d, 4, 4],
            2,
            vec![
                Layer::Conv2d {
                    name: "c".into(),
                    kernel: "c.k".into(),
                    bias: None,
                    stride: 1,
                    pad: 0,
                },
                Layer::Dense {
                    name: "fc".into(),
                    weight: "fc.w".into(),
                    bias: None,
                },
            ],
            p,
        )
        .unwrap()
    }

    #[test]
    fn strip_counts_follow_kernel_geometry() {
        let m = conv_model(3, 16, 32);
        let strips = decompose_strips(&m).unwrap();
        assert_eq!(strips.len(), 288);
        assert!(strips.iter().all(|s| s.p_strip() == 16));

        let m = conv_model(1, 5, 1);
        assert_eq!(decompose_strips(&m).unwrap().len(), 1);
    }

    #[test]
    fn reassembly_is_bit_exact() {
        let m = conv_model(3, 4, 3);
        let strips = decompose_strips(&m).unwrap();
        let info = &conv_layers(&m)[0];
        assert_eq!(&reassemble_kernel(info, &strips).unwrap(), m.param("c.k").unwrap());
        let flat = m.flat_params();
        for s in &strips {
            let from_flat: Vec<f64> = s.flat_indices.iter().map(|&i| flat[i]).collect();
            assert_eq!(from_flat, s.values);
        }
    }

    #[test]
    fn model_without_conv_is_rejected() {
        let mut p = NamedTensors::new();
        p.insert("w".into(), Tensor::zeros(vec![3, 2]).unwrap());
        let m = ModelGraph::new(
            vec![3],
            2,
            vec![Layer::Dense {
                name: "fc".into(),
                weight: "w".into(),
                bias: None,
            }],
            p,
        )
        .unwrap();
        assert!(decompose_strips(&m).is_err());
    }

    #[test]
    fn diagonal_hessian_trace_is_exact() {
        let q = Quadratic::diagonal(&[2.0, 4.0], vec![0.0, 0.0]).unwrap();
        for m in [1, 3, 17] {
            for seed in [0, 1, 99] {
                let t = group_trace_with(&q, &[0, 1], m, seed, 0, 1e-4).unwrap();
                assert_eq!(t, 6.0);
            }
        }
    }

    #[test]
    fn empty_group_rejected() {
        let q = Quadratic::diagonal(&[2.0], vec![0.0]).unwrap();
        assert!(group_trace_with(&q, &[], 4, 0, 0, 1e-4).is_err());
        assert!(group_trace_with(&q, &[0], 0, 0, 0, 1e-4).is_err());
    }

    #[test]
    fn score_formula() {
        let key = StripKey {
            layer_id: 0,
            out_channel: 0,
            m: 0,
            n: 0,
        };
        assert_eq!(SensitivityRecord::new(key, 2, 6.0, 0.25).score, 0.375);
        assert_eq!(SensitivityRecord::new(key, 4, 123.0, 0.0).score, 0.0);
    }

    fn rec(layer_id: usize, out_channel: usize, score: f64) -> SensitivityRecord {
        SensitivityRecord {
            key: StripKey {
                layer_id,
                out_channel,
                m: 0,
                n: 0,
            },
            p_strip: 1,
            trace: 0.0,
            sq_norm: 0.0,
            score,
        }
    }

    #[test]
    fn ranking_descends_with_structural_ties() {
        let recs = [rec(0, 0, 0.1), rec(0, 1, 0.9), rec(0, 2, 0.5)];
        assert_eq!(rank_order(&recs), vec![1, 2, 0]);
        let ties = [rec(1, 0, 0.5), rec(0, 3, 0.5), rec(0, 1, 0.5)];
        let ranked = rank_strips(&ties);
        let keys: Vec<_> = ranked.iter().map(|r| (r.key.layer_id, r.key.out_channel)).collect();
        assert_eq!(keys, vec![(0, 1), (0, 3), (1, 0)]);
    }

    #[test]
    fn csv_roundtrip_in_rank_order() {
        let recs = vec![
            SensitivityRecord::new(
                StripKey {
                    layer_id: 0,
                    out_channel: 1,
                    m: 2,
                    n: 0,
                },
                3,
                0.123456789012345,
                1.5,
            ),
            SensitivityRecord::new(
                StripKey {
                    layer_id: 2,
                    out_channel: 0,
                    m: 0,
                    n: 1,
                },
                4,
                -1e-7,
                0.25,
            ),
        ];
        let mut buf = Vec::new();
        write_sensitivity_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("layer_id,m,n,out_channel,p_strip,trace,sq_norm,score\n"));
        let back = read_sensitivity_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rank_strips(&recs));
    }
}
