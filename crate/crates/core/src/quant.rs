//! Symmetric uniform quantization and threshold-based 8-bit/4-bit clustering.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::strips::{decompose_strips, SensitivityRecord, StripKey, StripWeight};
use crate::tensor::ModelGraph;

pub const HIGH_BITS: u8 = 8;
pub const LOW_BITS: u8 = 4;

/// A symmetric quantizer: codes in `[-q_max, q_max]`, value = code · scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scale: f64,
}

impl QuantSpec {
    pub fn new(bits: u8, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(CimError::Argument(format!("scale must be positive and finite, got {scale}")));
        }
        Ok(QuantSpec { bits, scale })
    }

    pub fn q_max(&self) -> i32 {
        q_max(self.bits)
    }
}

pub fn q_max(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

fn check_bits(bits: u8) -> Result<()> {
    match bits {
        HIGH_BITS | LOW_BITS => Ok(()),
        other => Err(CimError::Argument(format!("unsupported bit-width {other}, expected 4 or 8"))),
    }
}

/// `scale = max|values| / q_max`, or 1 when every value is zero.
pub fn fit_scale(values: &[f64], bits: u8) -> Result<QuantSpec> {
    check_bits(bits)?;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max == 0.0 { 1.0 } else { max / f64::from(q_max(bits)) };
    QuantSpec::new(bits, scale)
}

/// Round-half-to-even of `x / scale`, clamped to the symmetric code range.
pub fn quantize(x: f64, spec: &QuantSpec) -> i32 {
    let q = spec.q_max();
    let code = (x / spec.scale).round_ties_even();
    code.clamp(-f64::from(q), f64::from(q)) as i32
}

pub fn dequantize(code: i32, spec: &QuantSpec) -> f64 {
    f64::from(code) * spec.scale
}

/// 8-bit codes of an activation vector with a scale fitted to it.
pub fn quantize_activation(values: &[f64]) -> (QuantSpec, Vec<i32>) {
    let spec = fit_scale(values, HIGH_BITS).expect("8 bits is supported");
    let codes = values.iter().map(|&v| quantize(v, &spec)).collect();
    (spec, codes)
}

/// Replaces an activation vector by its 8-bit dequantized image.
pub fn fake_quantize_activation(values: &mut [f64]) {
    let (spec, codes) = quantize_activation(values);
    for (v, c) in values.iter_mut().zip(codes) {
        *v = dequantize(c, &spec);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cluster {
    High,
    Low,
}

impl Cluster {
    pub fn bits(self) -> u8 {
        match self {
            Cluster::High => HIGH_BITS,
            Cluster::Low => LOW_BITS,
        }
    }
}

/// Quantizers of one layer. The 4-bit scale is tied to the 8-bit one by
/// `s_p = s_q · 2^k`, so 4-bit partial sums can be shifted into the 8-bit
/// accumulation domain exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScales {
    pub s_q: f64,
    pub s_p: f64,
    pub k: u32,
}

impl LayerScales {
    pub fn high(&self) -> QuantSpec {
        QuantSpec {
            bits: HIGH_BITS,
            scale: self.s_q,
        }
    }

    pub fn low(&self) -> QuantSpec {
        QuantSpec {
            bits: LOW_BITS,
            scale: self.s_p,
        }
    }

    pub fn spec(&self, cluster: Cluster) -> QuantSpec {
        match cluster {
            Cluster::High => self.high(),
            Cluster::Low => self.low(),
        }
    }

    /// Fits `s_q` to the 8-bit strips, then picks the smallest `k ≥ 0` whose
    /// `s_q · 2^k` covers the 4-bit strips without clamping.
    pub fn fit(high_values: &[f64], low_values: &[f64]) -> Self {
        let max_h = high_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let max_l = low_values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let q_hi = f64::from(q_max(HIGH_BITS));
        let q_lo = f64::from(q_max(LOW_BITS));
        if max_h == 0.0 {
            // nothing to align with: the layer is effectively 4-bit only
            let s = if max_l == 0.0 { 1.0 } else { max_l / q_lo };
            return LayerScales { s_q: s, s_p: s, k: 0 };
        }
        let s_q = max_h / q_hi;
        let mut k = 0u32;
        while s_q * f64::from(1u32 << k) * q_lo < max_l && k < 30 {
            k += 1;
        }
        LayerScales {
            s_q,
            s_p: s_q * f64::from(1u32 << k),
            k,
        }
    }
}

/// Cluster assignment of every strip plus per-layer quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct BitwidthMap {
    /// Threshold the assignment started from.
    pub threshold: f64,
    /// Effective threshold per layer; `HIGH ⇔ score > layer_thresholds[layer]`.
    pub layer_thresholds: BTreeMap<usize, f64>,
    pub assignments: BTreeMap<StripKey, Cluster>,
    /// Filled by [`fit_scales`]; empty straight after assignment.
    pub scales: BTreeMap<usize, LayerScales>,
}

impl BitwidthMap {
    pub fn cluster(&self, key: &StripKey) -> Option<Cluster> {
        self.assignments.get(key).copied()
    }

    /// Number of 8-bit strips.
    pub fn q(&self) -> usize {
        self.assignments.values().filter(|c| **c == Cluster::High).count()
    }

    /// Number of 4-bit strips.
    pub fn p_low(&self) -> usize {
        self.assignments.len() - self.q()
    }

    pub fn r(&self) -> usize {
        self.assignments.len()
    }

    pub fn layer_q(&self, layer_id: usize) -> usize {
        self.assignments
            .iter()
            .filter(|(k, c)| k.layer_id == layer_id && **c == Cluster::High)
            .count()
    }

    pub fn scales_for(&self, layer_id: usize) -> Result<&LayerScales> {
        self.scales
            .get(&layer_id)
            .ok_or_else(|| CimError::Argument(format!("no quantizer fitted for layer {layer_id}")))
    }

    /// Integer codes of a strip under its cluster's quantizer.
    pub fn strip_codes(&self, strip: &StripWeight) -> Result<(Cluster, Vec<i32>)> {
        let cluster = self
            .cluster(&strip.key)
            .ok_or_else(|| CimError::Argument(format!("strip {} has no assignment", strip.key)))?;
        let spec = self.scales_for(strip.key.layer_id)?.spec(cluster);
        Ok((cluster, strip.values.iter().map(|&v| quantize(v, &spec)).collect()))
    }
}

/// `HIGH` when `score > T`, `LOW` otherwise.
pub fn assign_clusters(records: &[SensitivityRecord], threshold: f64) -> Result<BitwidthMap> {
    assign_clusters_layered(records, threshold, &BTreeMap::new())
}

/// Like [`assign_clusters`], with per-layer threshold overrides.
pub fn assign_clusters_layered(
    records: &[SensitivityRecord],
    threshold: f64,
    overrides: &BTreeMap<usize, f64>,
) -> Result<BitwidthMap> {
    if records.is_empty() {
        return Err(CimError::Argument("no sensitivity records to cluster".into()));
    }
    let mut layer_thresholds = BTreeMap::new();
    let mut assignments = BTreeMap::new();
    for r in records {
        let t = *layer_thresholds
            .entry(r.key.layer_id)
            .or_insert_with(|| overrides.get(&r.key.layer_id).copied().unwrap_or(threshold));
        let cluster = if r.score > t { Cluster::High } else { Cluster::Low };
        if assignments.insert(r.key, cluster).is_some() {
            return Err(CimError::Argument(format!("duplicate record for strip {}", r.key)));
        }
    }
    Ok(BitwidthMap {
        threshold,
        layer_thresholds,
        assignments,
        scales: BTreeMap::new(),
    })
}

/// Fraction of strips at low precision.
pub fn compression_ratio(map: &BitwidthMap) -> f64 {
    if map.r() == 0 {
        return 0.0;
    }
    map.p_low() as f64 / map.r() as f64
}

/// Fits one `(s_q, s_p, k)` triple per convolution layer for the map's
/// current assignment.
pub fn fit_scales(model: &ModelGraph, map: &mut BitwidthMap) -> Result<()> {
    let strips = decompose_strips(model)?;
    check_coverage(&strips, map)?;
    let mut per_layer: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in &strips {
        let entry = per_layer.entry(s.key.layer_id).or_default();
        match map.assignments[&s.key] {
            Cluster::High => entry.0.extend_from_slice(&s.values),
            Cluster::Low => entry.1.extend_from_slice(&s.values),
        }
    }
    map.scales = per_layer
        .into_iter()
        .map(|(layer, (hi, lo))| (layer, LayerScales::fit(&hi, &lo)))
        .collect();
    Ok(())
}

/// Quantizes every strip with the map's fixed quantizers and writes the
/// dequantized values back into a copy of `model`.
pub fn apply_map(model: &ModelGraph, map: &BitwidthMap) -> Result<ModelGraph> {
    let strips = decompose_strips(model)?;
    check_coverage(&strips, map)?;
    let mut flat = model.flat_params();
    for s in &strips {
        let (cluster, codes) = map.strip_codes(s)?;
        let spec = map.scales_for(s.key.layer_id)?.spec(cluster);
        for (&i, &c) in s.flat_indices.iter().zip(&codes) {
            flat[i] = dequantize(c, &spec);
        }
    }
    model.with_flat_params(&flat)
}

/// `θ_c = Compress(θ, T)`: cluster at `T`, fit per-layer quantizers, and
/// replace every strip by its dequantized image.
pub fn compress(model: &ModelGraph, records: &[SensitivityRecord], threshold: f64) -> Result<(ModelGraph, BitwidthMap)> {
    let map = assign_clusters(records, threshold)?;
    compress_with_map(model, map)
}

pub fn compress_with_map(model: &ModelGraph, mut map: BitwidthMap) -> Result<(ModelGraph, BitwidthMap)> {
    fit_scales(model, &mut map)?;
    let compressed = apply_map(model, &map)?;
    Ok((compressed, map))
}

fn check_coverage(strips: &[StripWeight], map: &BitwidthMap) -> Result<()> {
    if let Some(s) = strips.iter().find(|s| !map.assignments.contains_key(&s.key)) {
        return Err(CimError::Argument(format!("strip {} has no sensitivity record", s.key)));
    }
    if map.assignments.len() != strips.len() {
        return Err(CimError::dim("assigned strip count", strips.len(), map.assignments.len()));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MapFile {
    threshold: f64,
    q: usize,
    p_low: usize,
    r: usize,
    layers: Vec<LayerEntry>,
    assignments: Vec<AssignmentEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    layer_id: usize,
    threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentEntry {
    layer_id: usize,
    m: usize,
    n: usize,
    out_channel: usize,
    cluster: Cluster,
}

impl BitwidthMap {
    pub fn to_json(&self) -> String {
        let file = MapFile {
            threshold: self.threshold,
            q: self.q(),
            p_low: self.p_low(),
            r: self.r(),
            layers: self
                .layer_thresholds
                .iter()
                .map(|(&layer_id, &threshold)| {
                    let s = self.scales.get(&layer_id);
                    LayerEntry {
                        layer_id,
                        threshold,
                        s_q: s.map(|s| s.s_q),
                        s_p: s.map(|s| s.s_p),
                        k: s.map(|s| s.k),
                    }
                })
                .collect(),
            assignments: self
                .assignments
                .iter()
                .map(|(k, c)| AssignmentEntry {
                    layer_id: k.layer_id,
                    m: k.m,
                    n: k.n,
                    out_channel: k.out_channel,
                    cluster: *c,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MapFile = serde_json::from_str(text).map_err(|e| CimError::Parse {
            path: "bitwidth map".into(),
            message: e.to_string(),
        })?;
        let mut scales = BTreeMap::new();
        let mut layer_thresholds = BTreeMap::new();
        for l in &file.layers {
            layer_thresholds.insert(l.layer_id, l.threshold);
            match (l.s_q, l.s_p, l.k) {
                (Some(s_q), Some(s_p), Some(k)) => {
                    if s_p != s_q * f64::from(1u32 << k.min(30)) {
                        return Err(CimError::Argument(format!(
                            "layer {}: s_p != s_q * 2^k",
                            l.layer_id
                        )));
                    }
                    scales.insert(l.layer_id, LayerScales { s_q, s_p, k });
                }
                (None, None, None) => {}
                _ => {
                    return Err(CimError::Argument(format!(
                        "layer {}: partial quantizer entry",
                        l.layer_id
                    )))
                }
            }
        }
        let assignments: BTreeMap<StripKey, Cluster> = file
            .assignments
            .iter()
            .map(|a| {
                (
                    StripKey {
                        layer_id: a.layer_id,
                        out_channel: a.out_channel,
                        m: a.m,
                        n: a.n,
                    },
                    a.cluster,
                )
            })
            .collect();
        let map = BitwidthMap {
            threshold: file.threshold,
            layer_thresholds,
            assignments,
            scales,
        };
        if map.q() != file.q || map.p_low() != file.p_low || map.r() != file.r {
            return Err(CimError::Argument("bitwidth map counts disagree with assignments".into()));
        }
        Ok(map)
    }
}
