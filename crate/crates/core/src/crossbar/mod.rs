//! Bit-sliced ReRAM crossbar model: tile placement, exact mixed-precision
//! matrix-vector products and closed-form energy/latency accounting.

mod cost;
mod infer;
mod mvm;
mod placement;

pub use cost::{simulate_cost, write_cost_csv, CostReport, CostSummary, LayerCost, Workload};
pub use infer::{compare_paths, crossbar_accuracy, crossbar_forward, reference_accuracy, reference_forward, PathComparison};
pub use mvm::{
    accumulator_bound, expand, ideal_mvm, mixed_mvm, mixed_mvm_int, AccumulatorOverflow, IntegerOutput, ACTIVATION_OFFSET,
};
pub use placement::{place, utilization, write_placement_csv, HostedStrip, Tile, TilePlacement};

use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::threshold::CapacityConfig;

/// Parametric crossbar hardware. Defaults: 128×128 arrays of 2-bit cells,
/// 256-level ADCs shared by 4 columns for 8-bit weights and 16-level ADCs
/// shared by 2 columns for 4-bit weights, 8-bit bit-serial inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareConfig {
    pub array_rows: usize,
    pub array_cols: usize,
    pub cell_bits: u32,
    pub adc_levels_high: u32,
    pub adc_levels_low: u32,
    pub cols_per_adc_high: usize,
    pub cols_per_adc_low: usize,
    pub input_bits: u32,
    /// Joules per conversion per unit of `2^adc_bits`.
    pub e_adc_unit: f64,
    /// Joules per partial-sum addition.
    pub e_accum_unit: f64,
    /// Joules per tile activation.
    pub e_other_unit: f64,
    /// Seconds per read cycle.
    pub t_read: f64,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            array_rows: 128,
            array_cols: 128,
            cell_bits: 2,
            adc_levels_high: 256,
            adc_levels_low: 16,
            cols_per_adc_high: 4,
            cols_per_adc_low: 2,
            input_bits: 8,
            e_adc_unit: 2e-15,
            e_accum_unit: 5e-15,
            e_other_unit: 1e-12,
            t_read: 10e-9,
        }
    }
}

impl HardwareConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CimError::Argument(m));
        if self.array_rows == 0 || self.array_cols == 0 {
            return bad("array dimensions must be >= 1".into());
        }
        if self.cell_bits == 0 {
            return bad("cell_bits must be >= 1".into());
        }
        for bits in [4u32, 8] {
            if bits % self.cell_bits != 0 {
                return bad(format!("{bits}-bit weights do not split into {}-bit cells", self.cell_bits));
            }
            if self.array_cols < (bits / self.cell_bits) as usize {
                return bad(format!("array too narrow for one {bits}-bit weight"));
            }
        }
        for (name, levels) in [("adc_levels_high", self.adc_levels_high), ("adc_levels_low", self.adc_levels_low)] {
            if levels < 2 || !levels.is_power_of_two() {
                return bad(format!("{name} = {levels} is not a power of two >= 2"));
            }
        }
        if self.cols_per_adc_high == 0 || self.cols_per_adc_low == 0 {
            return bad("columns per ADC must be >= 1".into());
        }
        if !(8..=16).contains(&self.input_bits) {
            return bad(format!(
                "input_bits = {} cannot carry offset 8-bit activation codes (need 8..=16)",
                self.input_bits
            ));
        }
        for (name, v) in [
            ("e_adc_unit", self.e_adc_unit),
            ("e_accum_unit", self.e_accum_unit),
            ("e_other_unit", self.e_other_unit),
            ("t_read", self.t_read),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Cells holding one weight of `bits` bits.
    pub fn cells_per_weight(&self, bits: u8) -> usize {
        (u32::from(bits) / self.cell_bits) as usize
    }

    /// Strips (column groups) one tile hosts at `bits`.
    pub fn strips_per_tile(&self, bits: u8) -> usize {
        self.array_cols / self.cells_per_weight(bits)
    }

    pub fn adc_bits(&self, bits: u8) -> u32 {
        self.adc_levels(bits).trailing_zeros()
    }

    pub fn adc_levels(&self, bits: u8) -> u32 {
        if bits == 8 {
            self.adc_levels_high
        } else {
            self.adc_levels_low
        }
    }

    pub fn cols_per_adc(&self, bits: u8) -> usize {
        if bits == 8 {
            self.cols_per_adc_high
        } else {
            self.cols_per_adc_low
        }
    }

    pub fn cells_per_tile(&self) -> usize {
        self.array_rows * self.array_cols
    }

    /// Capacity `C` of an 8-bit tile, used for cluster alignment.
    pub fn high_capacity(&self) -> CapacityConfig {
        CapacityConfig {
            c: self.strips_per_tile(8),
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_err = |e: &dyn std::fmt::Display| CimError::Argument(format!("hardware override {key}={value}: {e}"));
        macro_rules! assign {
            ($field:ident) => {
                self.$field = value.trim().parse().map_err(|e| parse_err(&e))?
            };
        }
        match key.trim() {
            "array_rows" => assign!(array_rows),
            "array_cols" => assign!(array_cols),
            "cell_bits" => assign!(cell_bits),
            "adc_levels_high" => assign!(adc_levels_high),
            "adc_levels_low" => assign!(adc_levels_low),
            "cols_per_adc_high" => assign!(cols_per_adc_high),
            "cols_per_adc_low" => assign!(cols_per_adc_low),
            "input_bits" => assign!(input_bits),
            "e_adc_unit" => assign!(e_adc_unit),
            "e_accum_unit" => assign!(e_accum_unit),
            "e_other_unit" => assign!(e_other_unit),
            "t_read" => assign!(t_read),
            other => return Err(CimError::Argument(format!("unknown hardware key '{other}'"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let hw = HardwareConfig::default();
        hw.validate().unwrap();
        assert_eq!(hw.cells_per_weight(8), 4);
        assert_eq!(hw.cells_per_weight(4), 2);
        assert_eq!(hw.strips_per_tile(8), 32);
        assert_eq!(hw.strips_per_tile(4), 64);
        assert_eq!(hw.adc_bits(8), 8);
        assert_eq!(hw.adc_bits(4), 4);
        assert_eq!(hw.high_capacity().c, 32);
    }

    #[test]
    fn overrides() {
        let mut hw = HardwareConfig::default();
        hw.set("array_cols", "32").unwrap();
        hw.set("e_adc_unit", "1e-14").unwrap();
        assert_eq!(hw.strips_per_tile(8), 8);
        assert_eq!(hw.e_adc_unit, 1e-14);
        assert!(hw.set("nope", "1").is_err());
        assert!(hw.set("array_rows", "x").is_err());
    }

    #[test]
    fn rejects_non_integral_cells() {
        let hw = HardwareConfig {
            cell_bits: 3,
            ..Default::default()
        };
        assert!(hw.validate().is_err());
        let hw = HardwareConfig {
            adc_levels_low: 15,
            ..Default::default()
        };
        assert!(hw.validate().is_err());
    }
}
