use super::{HardwareConfig, Tile, TilePlacement};
use crate::error::{CimError, Result};
use crate::quant::{q_max, quantize_activation, BitwidthMap, HIGH_BITS, LOW_BITS};
use crate::strips::ConvLayerInfo;
use crate::tensor::{conv_output_dim, Tensor};

/// Shift applied to signed 8-bit activation codes so they bit-serialize as
/// unsigned values in `0..=254`.
pub const ACTIVATION_OFFSET: i32 = 127;

/// An integer result left the 32-bit accumulator range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccumulatorOverflow {
    pub index: usize,
}

/// Exact column-group dot products `Σ_i a_i · w_i` of one tile for a shared
/// 1-bit input slice of length `rows_used`.
pub fn ideal_mvm(tile: &Tile, input_slice: &[u8]) -> Result<Vec<i32>> {
    if input_slice.len() != tile.rows_used {
        return Err(CimError::dim("input slice rows", tile.rows_used, input_slice.len()));
    }
    Ok(tile
        .strips
        .iter()
        .map(|s| dot_bits(&s.codes, input_slice))
        .collect())
}

/// Like [`ideal_mvm`] but with one input slice per column group, which is how
/// strips of different kernel offsets sharing a tile see their own windows.
pub(crate) fn ideal_mvm_grouped(tile: &Tile, slices: &[Vec<u8>]) -> Result<Vec<i32>> {
    if slices.len() != tile.strips.len() {
        return Err(CimError::dim("input slice groups", tile.strips.len(), slices.len()));
    }
    tile.strips
        .iter()
        .zip(slices)
        .map(|(s, x)| {
            if x.len() != s.codes.len() {
                return Err(CimError::dim("input slice rows", s.codes.len(), x.len()));
            }
            Ok(dot_bits(&s.codes, x))
        })
        .collect()
}

#[inline]
fn dot_bits(codes: &[i32], bits: &[u8]) -> i32 {
    // |code| ≤ 127 and rows ≤ array_rows keep this far inside i32
    codes.iter().zip(bits).map(|(&w, &a)| w * i32::from(a)).sum()
}

/// Multiplies every element by `2^k`, refusing to wrap.
pub fn expand(z_low: &[i32], k: u32) -> std::result::Result<Vec<i32>, AccumulatorOverflow> {
    z_low
        .iter()
        .enumerate()
        .map(|(index, &z)| {
            1i32.checked_shl(k)
                .filter(|_| k < 31)
                .and_then(|f| z.checked_mul(f))
                .ok_or(AccumulatorOverflow { index })
        })
        .collect()
}

/// Worst-case `|Z|` reachable in any intermediate accumulation of a layer:
/// offset 8-bit inputs against full-scale 8-bit codes plus the expanded
/// 4-bit contribution.
pub fn accumulator_bound(layer: &ConvLayerInfo, k: u32, hw: &HardwareConfig) -> i128 {
    let rows = (layer.ksize * layer.ksize * layer.depth) as i128;
    let a_max = (1i128 << hw.input_bits) - 1;
    let high = rows * i128::from(q_max(HIGH_BITS)) * a_max;
    let low = rows * i128::from(q_max(LOW_BITS)) * a_max * (1i128 << k.min(64));
    high + low
}

/// Integer result of one layer on its tiles: `z = Z_q + 2^k · Z_p` in
/// `N×H'×W'` order, with the scales that map it back to reals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerOutput {
    pub shape: [usize; 3],
    pub z: Vec<i32>,
    pub s_q: f64,
    pub s_a: f64,
}

impl IntegerOutput {
    /// `s_q · s_a · z`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let f = self.s_q * self.s_a;
        Tensor::new(self.shape.to_vec(), self.z.iter().map(|&z| f * f64::from(z)).collect())
    }
}

/// One convolution layer executed on its tiles. `activation` is `D×H×W`;
/// the result is `N×H'×W'` without bias and equals
/// `s_q · s_a · (Z_q + 2^k · Z_p)` with `Z_q`, `Z_p` the exact integer
/// products of the 8-bit and 4-bit strips with the 8-bit activation codes.
pub fn mixed_mvm(
    placement: &TilePlacement,
    layer: &ConvLayerInfo,
    activation: &Tensor,
    map: &BitwidthMap,
    hw: &HardwareConfig,
) -> Result<Tensor> {
    mixed_mvm_int(placement, layer, activation, map, hw)?.to_tensor()
}

/// [`mixed_mvm`] before the final rescaling.
pub fn mixed_mvm_int(
    placement: &TilePlacement,
    layer: &ConvLayerInfo,
    activation: &Tensor,
    map: &BitwidthMap,
    hw: &HardwareConfig,
) -> Result<IntegerOutput> {
    let shape = activation.shape();
    if shape.len() != 3 {
        return Err(CimError::dim("activation rank", 3, shape.len()));
    }
    if shape[0] != layer.depth {
        return Err(CimError::dim("activation axis 0", layer.depth, shape[0]));
    }
    let (h, w) = (shape[1], shape[2]);
    let ho = conv_output_dim(h, layer.ksize, layer.stride, layer.pad)?;
    let wo = conv_output_dim(w, layer.ksize, layer.stride, layer.pad)?;
    let scales = map.scales_for(layer.layer_id)?;
    let tiles: Vec<&Tile> = placement.layer_tiles(layer.layer_id).collect();
    let Some(first) = tiles.first() else {
        return Err(CimError::Argument(format!("layer {} has no tiles", layer.layer_id)));
    };
    for t in &tiles {
        for s in &t.strips {
            let k = &s.key;
            if k.m >= layer.ksize || k.n >= layer.ksize || k.out_channel >= layer.out_channels {
                return Err(CimError::Shape(format!("strip {k} outside layer {} kernel", layer.layer_id)));
            }
            if s.row_start + s.codes.len() > layer.depth {
                return Err(CimError::Shape(format!("strip {k} rows exceed depth {}", layer.depth)));
            }
        }
    }
    if accumulator_bound(layer, scales.k, hw) > i128::from(i32::MAX) {
        return Err(CimError::Overflow {
            layer: layer.layer_id,
            tile: first.id,
            detail: format!(
                "worst-case accumulation exceeds 32 bits (rows {}, k {})",
                layer.ksize * layer.ksize * layer.depth,
                scales.k
            ),
        });
    }

    let (a_spec, codes) = quantize_activation(activation.data());
    let offset = ACTIVATION_OFFSET as u32;
    let u: Vec<u32> = codes.iter().map(|&c| (c + ACTIVATION_OFFSET) as u32).collect();
    let plane = h * w;
    let overflow = |tile: usize, what: &str| CimError::Overflow {
        layer: layer.layer_id,
        tile,
        detail: what.to_string(),
    };
    // Σ codes per hosted strip, for the offset correction
    let code_sums: Vec<Vec<i32>> = tiles
        .iter()
        .map(|t| t.strips.iter().map(|s| s.codes.iter().sum()).collect())
        .collect();

    let n_out = layer.out_channels;
    let mut out = vec![0i32; n_out * ho * wo];
    let mut zq = vec![0i32; n_out];
    let mut zp = vec![0i32; n_out];
    let mut windows: Vec<Vec<u32>> = Vec::new();
    let mut slices: Vec<Vec<u8>> = Vec::new();
    for oi in 0..ho {
        for oj in 0..wo {
            zq.fill(0);
            zp.fill(0);
            for (t, sums) in tiles.iter().zip(&code_sums) {
                windows.clear();
                for s in &t.strips {
                    let src = source(layer, h, w, oi, oj, s.key.m, s.key.n);
                    windows.push(
                        (s.row_start..s.row_start + s.codes.len())
                            .map(|d| match src {
                                Some((i, j)) => u[d * plane + i * w + j],
                                None => offset,
                            })
                            .collect(),
                    );
                }
                let mut acc = vec![0i32; t.strips.len()];
                for b in 0..hw.input_bits {
                    slices.clear();
                    slices.extend(windows.iter().map(|x| x.iter().map(|v| ((v >> b) & 1) as u8).collect()));
                    let partial = ideal_mvm_grouped(t, &slices)?;
                    for (a, p) in acc.iter_mut().zip(partial) {
                        *a = p
                            .checked_mul(1i32 << b)
                            .and_then(|x| a.checked_add(x))
                            .ok_or_else(|| overflow(t.id, "bit-serial accumulation"))?;
                    }
                }
                let target = if t.bits == HIGH_BITS { &mut zq } else { &mut zp };
                for ((s, a), sum) in t.strips.iter().zip(acc).zip(sums) {
                    let signed = sum
                        .checked_mul(ACTIVATION_OFFSET)
                        .and_then(|c| a.checked_sub(c))
                        .ok_or_else(|| overflow(t.id, "offset correction"))?;
                    let slot = &mut target[s.key.out_channel];
                    *slot = slot
                        .checked_add(signed)
                        .ok_or_else(|| overflow(t.id, "column-group reduction"))?;
                }
            }
            let zp_x = expand(&zp, scales.k).map_err(|e| overflow(first.id, &format!("expand of channel {}", e.index)))?;
            for o in 0..n_out {
                let z = zq[o]
                    .checked_add(zp_x[o])
                    .ok_or_else(|| overflow(first.id, "Z_q + expand(Z_p)"))?;
                out[(o * ho + oi) * wo + oj] = z;
            }
        }
    }
    Ok(IntegerOutput {
        shape: [n_out, ho, wo],
        z: out,
        s_q: scales.s_q,
        s_a: a_spec.scale,
    })
}

#[inline]
fn source(layer: &ConvLayerInfo, h: usize, w: usize, oi: usize, oj: usize, m: usize, n: usize) -> Option<(usize, usize)> {
    let i = (oi * layer.stride + m).checked_sub(layer.pad)?;
    let j = (oj * layer.stride + n).checked_sub(layer.pad)?;
    (i < h && j < w).then_some((i, j))
}
