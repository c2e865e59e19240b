use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::placement::utilization_of;
use super::{HardwareConfig, Tile, TilePlacement};
use crate::error::{CimError, Result};
use crate::strips::conv_layers;
use crate::tensor::{conv_output_dim, ModelGraph};

/// Input vectors each layer's tiles process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub n_input_vectors: BTreeMap<usize, u64>,
}

impl Workload {
    pub fn uniform(layer_ids: impl IntoIterator<Item = usize>, n: u64) -> Self {
        Workload {
            n_input_vectors: layer_ids.into_iter().map(|l| (l, n)).collect(),
        }
    }

    /// One input vector per output position per sample.
    pub fn for_model(model: &ModelGraph, samples: u64) -> Result<Self> {
        let mut n_input_vectors = BTreeMap::new();
        for c in conv_layers(model) {
            let shape = model.activation_shape(c.layer_id);
            let ho = conv_output_dim(shape[1], c.ksize, c.stride, c.pad)?;
            let wo = conv_output_dim(shape[2], c.ksize, c.stride, c.pad)?;
            n_input_vectors.insert(c.layer_id, (ho * wo) as u64 * samples);
        }
        Ok(Workload { n_input_vectors })
    }

    pub fn scaled(&self, factor: u64) -> Self {
        Workload {
            n_input_vectors: self.n_input_vectors.iter().map(|(&l, &n)| (l, n * factor)).collect(),
        }
    }
}

/// Energy in joules, latency in seconds, utilization in percent.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSummary {
    pub energy_adc: f64,
    pub energy_accum: f64,
    pub energy_other: f64,
    pub energy_total: f64,
    pub latency: f64,
    pub utilization_high: f64,
    pub utilization_low: f64,
    pub tiles_high: usize,
    pub tiles_low: usize,
    pub conversions: u64,
}

impl CostSummary {
    pub fn adc_share(&self) -> f64 {
        if self.energy_total == 0.0 {
            0.0
        } else {
            self.energy_adc / self.energy_total
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer_id: usize,
    pub n_input_vectors: u64,
    #[serde(flatten)]
    pub cost: CostSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: CostSummary,
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CimError::Parse {
            path: "cost report".into(),
            message: e.to_string(),
        })
    }
}

struct TileCost {
    conversions: u64,
    per_adc: u64,
    adds: u64,
    energy_adc: f64,
}

fn tile_cost(t: &Tile, n: u64, hw: &HardwareConfig) -> TileCost {
    let cols = t.cols_used(hw) as u64;
    let per_adc_cols = hw.cols_per_adc(t.bits) as u64;
    let bits = u64::from(hw.input_bits);
    let conversions = n * bits * cols.div_ceil(per_adc_cols);
    TileCost {
        conversions,
        per_adc: n * bits * per_adc_cols.min(cols),
        // every conversion is shifted into its column group's sum, then each
        // group adds into its output channel once per input vector
        adds: conversions + n * t.strips.len() as u64,
        energy_adc: conversions as f64 * hw.e_adc_unit * f64::from(1u32 << hw.adc_bits(t.bits)),
    }
}

/// Closed-form energy and latency. Tiles of one layer operate in parallel;
/// layers run one after another.
pub fn simulate_cost(placement: &TilePlacement, workload: &Workload, hw: &HardwareConfig) -> Result<CostReport> {
    hw.validate()?;
    let mut layers = Vec::new();
    for layer_id in placement.layer_ids() {
        let n = *workload
            .n_input_vectors
            .get(&layer_id)
            .ok_or_else(|| CimError::Argument(format!("workload has no entry for layer {layer_id}")))?;
        if n == 0 {
            return Err(CimError::Argument(format!("layer {layer_id}: n_input_vectors must be >= 1")));
        }
        let tiles: Vec<&Tile> = placement.layer_tiles(layer_id).collect();
        let mut c = CostSummary::default();
        let mut adds = 0u64;
        let mut slowest = 0u64;
        for t in &tiles {
            let tc = tile_cost(t, n, hw);
            c.conversions += tc.conversions;
            c.energy_adc += tc.energy_adc;
            adds += tc.adds;
            slowest = slowest.max(tc.per_adc);
            if t.bits == 8 {
                c.tiles_high += 1;
            } else {
                c.tiles_low += 1;
            }
        }
        c.energy_accum = adds as f64 * hw.e_accum_unit;
        c.energy_other = (n * tiles.len() as u64) as f64 * hw.e_other_unit;
        c.energy_total = c.energy_adc + c.energy_accum + c.energy_other;
        c.latency = slowest as f64 * hw.t_read;
        c.utilization_high = utilization_of(tiles.iter().copied().filter(|t| t.bits == 8));
        c.utilization_low = utilization_of(tiles.iter().copied().filter(|t| t.bits != 8));
        layers.push(LayerCost {
            layer_id,
            n_input_vectors: n,
            cost: c,
        });
    }
    let mut total = CostSummary::default();
    for l in &layers {
        total.energy_adc += l.cost.energy_adc;
        total.energy_accum += l.cost.energy_accum;
        total.energy_other += l.cost.energy_other;
        total.latency += l.cost.latency;
        total.tiles_high += l.cost.tiles_high;
        total.tiles_low += l.cost.tiles_low;
        total.conversions += l.cost.conversions;
    }
    total.energy_total = total.energy_adc + total.energy_accum + total.energy_other;
    total.utilization_high = super::utilization(placement, 8);
    total.utilization_low = super::utilization(placement, 4);
    Ok(CostReport { layers, total })
}

/// Flat CSV: one row per layer plus a `total` row.
pub fn write_cost_csv<W: Write>(out: W, report: &CostReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| CimError::Parse {
        path: "cost csv".into(),
        message: e.to_string(),
    };
    w.write_record([
        "scope",
        "layer_id",
        "n_input_vectors",
        "tiles_high",
        "tiles_low",
        "conversions",
        "energy_adc",
        "energy_accum",
        "energy_other",
        "energy_total",
        "latency",
        "utilization_high",
        "utilization_low",
    ])
    .map_err(wrap)?;
    let row = |scope: &str, layer: String, n: String, c: &CostSummary| {
        vec![
            scope.to_string(),
            layer,
            n,
            c.tiles_high.to_string(),
            c.tiles_low.to_string(),
            c.conversions.to_string(),
            c.energy_adc.to_string(),
            c.energy_accum.to_string(),
            c.energy_other.to_string(),
            c.energy_total.to_string(),
            c.latency.to_string(),
            c.utilization_high.to_string(),
            c.utilization_low.to_string(),
        ]
    };
    for l in &report.layers {
        w.write_record(row("layer", l.layer_id.to_string(), l.n_input_vectors.to_string(), &l.cost))
            .map_err(wrap)?;
    }
    w.write_record(row("total", String::new(), String::new(), &report.total))
        .map_err(wrap)?;
    w.flush().map_err(|e| CimError::io("cost csv", e))
}
