//! Architecture extraction from per-tile power traces.
//!
//! Everything here works from [`PowerTrace`]s and the public hardware
//! description in [`HwKnowledge`]; mappings, weights and simulator event logs
//! are deliberately out of reach.
//!
//! [`PowerTrace`]: crate::trace::PowerTrace

mod detect;
mod extract;
mod report;

pub use detect::{
    detect_analog_ops, extract_features, fit_lattice, threshold_runs, DetectorConfig, Lattice,
    TileFeatures,
};
pub use extract::{
    estimate_total_rows, exact_sqrt, grid_shape, group_by_start, kernel_from_rows,
    kernel_size_extraction, kernel_size_extraction_first_layer, layer_property_extraction,
    output_size_extraction, pool_conv_to_conv, pool_conv_to_fc, reconstruct_architecture,
    row_power_reference, run_attack, KernelEstimate, LayerGroup, LayerKind, OutputSize,
    PoolCandidate,
};
pub use report::{compare, ComparisonReport, ExtractedArchitecture, ExtractedLayer, FieldMismatch};

use crate::netspec::Shape;

/// What the adversary knows about the accelerator: the tile datasheet and
/// the dataset input geometry. No mapping or weight information.
#[derive(Debug, Clone, PartialEq)]
pub struct HwKnowledge {
    pub array_rows: usize,
    pub array_cols: usize,
    pub adc_count: usize,
    pub adc_bits: u32,
    pub cells_per_weight: usize,
    /// Bit-serial input precision.
    pub input_bits: u32,
    pub serial_clock_hz: f64,
    pub digital_clock_hz: f64,
    pub adc_step_time: f64,
    pub settle_time: f64,
    /// Layer hand-off latency without pooling, digital clocks.
    pub handoff_clocks: u64,
    /// Dataset image geometry.
    pub input: Shape,
}

impl Default for HwKnowledge {
    fn default() -> Self {
        Self {
            array_rows: 128,
            array_cols: 128,
            adc_count: 4,
            adc_bits: 8,
            cells_per_weight: 2,
            input_bits: 8,
            serial_clock_hz: 50e6,
            digital_clock_hz: 500e6,
            adc_step_time: 2e-9,
            settle_time: 4e-9,
            handoff_clocks: 16,
            input: Shape::new(3, 32, 32),
        }
    }
}

impl HwKnowledge {
    /// Conversions per ADC per input bit on a fully mapped tile.
    pub fn max_conversions(&self) -> usize {
        self.array_cols / (2 * self.adc_count)
    }

    /// Array columns per weight: positive/negative times the cell split.
    pub fn cols_per_weight(&self) -> usize {
        2 * self.cells_per_weight
    }

    /// Duration of one input bit when each ADC runs `conversions` conversions.
    pub fn bit_period(&self, conversions: usize) -> f64 {
        self.settle_time
            + (conversions as f64) * self.adc_bits as f64 * self.adc_step_time
            + 1.0 / self.digital_clock_hz
    }

    pub fn serial_period(&self) -> f64 {
        1.0 / self.serial_clock_hz
    }

    pub fn handoff_time(&self) -> f64 {
        self.handoff_clocks as f64 / self.digital_clock_hz
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periods() {
        let hw = HwKnowledge::default();
        assert_eq!(hw.max_conversions(), 16);
        assert!((hw.bit_period(16) - 262e-9).abs() < 1e-15);
        assert!((hw.bit_period(12) - 198e-9).abs() < 1e-15);
    }

    /// The attack sources must not reach into the mapping, the simulator or
    /// its event log.
    #[test]
    fn information_firewall() {
        let sources = [
            ("mod.rs", include_str!("mod.rs")),
            ("detect.rs", include_str!("detect.rs")),
            ("extract.rs", include_str!("extract.rs")),
            ("report.rs", include_str!("report.rs")),
        ];
        let forbidden = [
            "crate::mapper",
            "crate::powersim",
            "EventLog",
            "TileMapping",
            "QuantizedWeights",
            "events.csv",
        ];
        for (name, src) in sources {
            let code: String = src.split("#[cfg(test)]").next().unwrap().to_string();
            for f in forbidden {
                assert!(!code.contains(f), "{name} references {f}");
            }
        }
    }
}
