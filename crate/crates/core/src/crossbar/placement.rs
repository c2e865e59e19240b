use std::collections::BTreeMap;
use std::io::Write;

use super::HardwareConfig;
use crate::error::{CimError, Result};
use crate::quant::{BitwidthMap, Cluster};
use crate::strips::{StripKey, StripWeight};

/// The part of one strip stored on one tile: rows
/// `row_start .. row_start + codes.len()` of the strip.
#[derive(Debug, Clone, PartialEq)]
pub struct HostedStrip {
    pub key: StripKey,
    pub row_start: usize,
    pub codes: Vec<i32>,
}

impl HostedStrip {
    pub fn rows(&self) -> usize {
        self.codes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: usize,
    pub bits: u8,
    pub layer_id: usize,
    /// Row band when strips are taller than the array.
    pub band: usize,
    /// Column groups in column order.
    pub strips: Vec<HostedStrip>,
    pub rows_used: usize,
    pub cells_used: usize,
    pub cells_total: usize,
}

impl Tile {
    pub fn cols_used(&self, hw: &HardwareConfig) -> usize {
        self.strips.len() * hw.cells_per_weight(self.bits)
    }
}

/// Strip-to-tile mapping with integer weight codes.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePlacement {
    pub tiles: Vec<Tile>,
}

impl TilePlacement {
    pub fn layer_tiles(&self, layer_id: usize) -> impl Iterator<Item = &Tile> {
        self.tiles.iter().filter(move |t| t.layer_id == layer_id)
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.tiles.iter().map(|t| t.layer_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn tile_count(&self, bits: u8) -> usize {
        self.tiles.iter().filter(|t| t.bits == bits).count()
    }
}

/// Packs strips onto tiles: 8-bit strips onto 8-bit tiles, 4-bit strips onto
/// 4-bit tiles, each layer separately, first-fit in the order `strips` is
/// given (callers pass rank order). Strips taller than the array are split
/// row-wise over vertically stacked tiles.
pub fn place(map: &BitwidthMap, strips: &[StripWeight], hw: &HardwareConfig) -> Result<TilePlacement> {
    hw.validate()?;
    let mut groups: BTreeMap<(usize, u8), Vec<(&StripWeight, Vec<i32>)>> = BTreeMap::new();
    let mut depth: BTreeMap<usize, usize> = BTreeMap::new();
    for s in strips {
        let (cluster, codes) = map.strip_codes(s)?;
        let d = *depth.entry(s.key.layer_id).or_insert(s.p_strip());
        if d != s.p_strip() {
            return Err(CimError::dim(format!("strip {} length", s.key), d, s.p_strip()));
        }
        // 8-bit groups first within a layer
        let order = match cluster {
            Cluster::High => 0u8,
            Cluster::Low => 1u8,
        };
        groups.entry((s.key.layer_id, order)).or_default().push((s, codes));
    }

    let mut tiles = Vec::new();
    for ((layer_id, order), members) in groups {
        let bits = if order == 0 { 8 } else { 4 };
        let cap = hw.strips_per_tile(bits);
        let d = depth[&layer_id];
        let bands = d.div_ceil(hw.array_rows);
        for stack in members.chunks(cap) {
            for band in 0..bands {
                let row_start = band * hw.array_rows;
                let rows = hw.array_rows.min(d - row_start);
                let hosted: Vec<HostedStrip> = stack
                    .iter()
                    .map(|(s, codes)| HostedStrip {
                        key: s.key,
                        row_start,
                        codes: codes[row_start..row_start + rows].to_vec(),
                    })
                    .collect();
                let cells_used = hosted.len() * rows * hw.cells_per_weight(bits);
                tiles.push(Tile {
                    id: tiles.len(),
                    bits,
                    layer_id,
                    band,
                    strips: hosted,
                    rows_used: rows,
                    cells_used,
                    cells_total: hw.cells_per_tile(),
                });
            }
        }
    }
    Ok(TilePlacement { tiles })
}

/// `100 · Σ used cells / Σ cells` over the tiles of one bit-width; 100 when
/// there are none.
pub fn utilization(p: &TilePlacement, bits: u8) -> f64 {
    utilization_of(p.tiles.iter().filter(|t| t.bits == bits))
}

pub(crate) fn utilization_of<'a>(tiles: impl Iterator<Item = &'a Tile>) -> f64 {
    let (used, total) = tiles.fold((0usize, 0usize), |(u, t), tile| (u + tile.cells_used, t + tile.cells_total));
    if total == 0 {
        100.0
    } else {
        100.0 * used as f64 / total as f64
    }
}

/// Placement dump, one row per tile.
pub fn write_placement_csv<W: Write>(out: W, p: &TilePlacement) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| CimError::Parse {
        path: "placement csv".into(),
        message: e.to_string(),
    };
    w.write_record(["tile_id", "bits", "layer_id", "strips", "cells_used"])
        .map_err(wrap)?;
    for t in &p.tiles {
        w.write_record([
            t.id.to_string(),
            t.bits.to_string(),
            t.layer_id.to_string(),
            t.strips.len().to_string(),
            t.cells_used.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| CimError::io("placement csv", e))
}
