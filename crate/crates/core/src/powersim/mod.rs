//! Dynamic power simulation of a tiled RRAM accelerator running one or more
//! inferences with the input pipeline halted between images.

mod analog;
mod digital;
mod sar;
mod sim;

pub use analog::{array_read_event, partial_sum_units, subtract_and_sample, ReadEvent};
pub use digital::{
    bit_transitions, digital_energy, digital_power, DigitalKind, DigitalLut, Transitions,
};
pub use sar::{conversion_energy, sar_convert, sar_step_energy, unit_capacitance, SarConversion};
pub use sim::{simulate_inference, Event, EventKind, EventLog, SimOutput};

use crate::error::{Error, Result};

/// Electrical and timing parameters of a tile and its periphery.
#[derive(Debug, Clone, PartialEq)]
pub struct TechnologyModel {
    /// Read pulse amplitude, volts.
    pub v_read: f64,
    pub v_dd: f64,
    /// SAR ADC reference, volts.
    pub v_ref: f64,
    /// DAC unit capacitor, farads.
    pub c_unit: f64,
    /// Sample/hold capacitance; equals the binary-weighted DAC total.
    pub c_sample: f64,
    /// Bitline parasitic per row, farads.
    pub c_bitline: f64,
    pub serial_clock_hz: f64,
    pub digital_clock_hz: f64,
    /// One SAR decision, seconds.
    pub adc_step_time: f64,
    /// Stable-read window after a read pulse, seconds.
    pub settle_time: f64,
    /// Word/source-line driver power per used row while a read pulse is applied, watts.
    pub row_driver_power: f64,
    /// Hand-off latency between layers without pooling, in digital clocks.
    pub handoff_clocks: u64,
    pub digital_energy_lut: DigitalLut,
}

impl Default for TechnologyModel {
    fn default() -> Self {
        Self {
            v_read: 0.2,
            v_dd: 0.9,
            v_ref: 0.9,
            c_unit: 1e-15,
            c_sample: 256e-15,
            c_bitline: 1e-16,
            serial_clock_hz: 50e6,
            digital_clock_hz: 500e6,
            adc_step_time: 2e-9,
            settle_time: 4e-9,
            row_driver_power: 300e-6,
            handoff_clocks: 16,
            digital_energy_lut: DigitalLut::default(),
        }
    }
}

impl TechnologyModel {
    pub fn validate(&self, adc_bits: u32) -> Result<()> {
        let positive = [
            ("v_read", self.v_read),
            ("v_dd", self.v_dd),
            ("c_unit", self.c_unit),
            ("c_sample", self.c_sample),
            ("c_bitline", self.c_bitline),
            ("serial_clock_hz", self.serial_clock_hz),
            ("digital_clock_hz", self.digital_clock_hz),
            ("adc_step_time", self.adc_step_time),
            ("settle_time", self.settle_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "tech.{name} must be positive, got {v}"
                )));
            }
        }
        // v_ref = 0 is accepted so the ADC energy curve can be checked in the degenerate case.
        if self.v_ref < 0.0 || self.row_driver_power < 0.0 {
            return Err(Error::Config(
                "tech.v_ref and tech.row_driver_power must be non-negative".into(),
            ));
        }
        let total = (1u64 << adc_bits) as f64 * self.c_unit;
        if ((self.c_sample - total) / total).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "tech.c_sample ({}) must equal 2^adc_bits x c_unit ({total})",
                self.c_sample
            )));
        }
        for (name, secs) in [
            ("adc_step_time", self.adc_step_time),
            ("settle_time", self.settle_time),
            ("digital clock period", self.digital_period()),
        ] {
            let ps = secs * 1e12;
            if (ps - ps.round()).abs() > 1e-6 || ps.round() < 1.0 {
                return Err(Error::Config(format!(
                    "{name} must be a whole number of picoseconds"
                )));
            }
        }
        self.digital_energy_lut.validate()
    }

    pub fn digital_period(&self) -> f64 {
        1.0 / self.digital_clock_hz
    }

    pub fn serial_period(&self) -> f64 {
        1.0 / self.serial_clock_hz
    }

    /// Duration of one input bit on a tile whose ADCs each run `conversions`
    /// conversions: stable read, SAR conversions, one shift-add clock.
    pub fn bit_period(&self, conversions: usize, adc_bits: u32) -> f64 {
        self.settle_time
            + (conversions as f64) * adc_bits as f64 * self.adc_step_time
            + self.digital_period()
    }
}

/// Options for one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOptions {
    /// Hold the next image until the previous inference completes.
    pub halt_pipeline: bool,
    /// Random per-tile start delay in `[0, max]` seconds.
    pub scramble_max_delay: Option<f64>,
    /// Pad every tile to the fully-mapped conversion count with dummy conversions.
    pub pad_adc: bool,
    pub rng_seed: u64,
    /// Native trace sample rate, Sa/s. Must divide 1e12.
    pub sample_rate: f64,
    /// Idle margin kept before and after each tile's activity, seconds.
    pub idle_margin: f64,
    /// When false only the functional outputs are computed.
    pub record_traces: bool,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            halt_pipeline: true,
            scramble_max_delay: None,
            pad_adc: false,
            rng_seed: 0,
            sample_rate: 1e10,
            idle_margin: 1e-6,
            record_traces: true,
        }
    }
}
