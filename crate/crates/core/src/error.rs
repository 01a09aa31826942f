use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },

    #[error("network parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("quantization error: {0}")]
    Quantize(String),

    #[error("mapping error at layer {layer}: {reason}")]
    Mapping { layer: usize, reason: String },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trace format error: {0}")]
    TraceFormat(String),

    #[error("invalid resampling rate {target} Sa/s for a {native} Sa/s trace (valid divisors include {valid})")]
    Resample {
        native: f64,
        target: f64,
        valid: String,
    },

    #[error("attack failure: {0}")]
    Attack(String),

    #[error("unknown digital component `{0}`")]
    UnknownComponent(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
