use std::fmt;
use std::str::FromStr;

use super::TechnologyModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DigitalKind {
    ShiftAdd,
    Register,
    Relu,
    MaxPool,
    Router,
}

impl DigitalKind {
    pub const ALL: [DigitalKind; 5] = [
        DigitalKind::ShiftAdd,
        DigitalKind::Register,
        DigitalKind::Relu,
        DigitalKind::MaxPool,
        DigitalKind::Router,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DigitalKind::ShiftAdd => "shift_add",
            DigitalKind::Register => "register",
            DigitalKind::Relu => "relu",
            DigitalKind::MaxPool => "maxpool",
            DigitalKind::Router => "router",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DigitalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DigitalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DigitalKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }
}

/// Per-bit transition energies `(rise 0->1, fall 1->0)` in joules.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalLut {
    entries: [(f64, f64); 5],
}

impl Default for DigitalLut {
    fn default() -> Self {
        Self {
            entries: [
                (1.2e-15, 0.8e-15), // shift_add
                (1.0e-15, 0.6e-15), // register
                (0.6e-15, 0.5e-15), // relu
                (0.9e-15, 0.7e-15), // maxpool
                (2.0e-15, 1.5e-15), // router
            ],
        }
    }
}

impl DigitalLut {
    pub fn get(&self, kind: DigitalKind) -> (f64, f64) {
        self.entries[kind.index()]
    }

    pub fn set(&mut self, kind: DigitalKind, rise: f64, fall: f64) {
        self.entries[kind.index()] = (rise, fall);
    }

    pub fn validate(&self) -> Result<()> {
        for k in DigitalKind::ALL {
            let (r, f) = self.get(k);
            if !(r >= 0.0 && f >= 0.0) {
                return Err(Error::Config(format!(
                    "digital LUT entry for {k} must be non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Transitions {
    pub rising: u64,
    pub falling: u64,
}

impl std::ops::AddAssign for Transitions {
    fn add_assign(&mut self, o: Self) {
        self.rising += o.rising;
        self.falling += o.falling;
    }
}

/// Bit flips of a 32-bit register going from `old` to `new`.
pub fn bit_transitions(old: i64, new: i64) -> Transitions {
    let (o, n) = (old as u32, new as u32);
    Transitions {
        rising: (!o & n).count_ones() as u64,
        falling: (o & !n).count_ones() as u64,
    }
}

pub fn digital_energy(kind: DigitalKind, t: Transitions, tech: &TechnologyModel) -> f64 {
    let (rise, fall) = tech.digital_energy_lut.get(kind);
    t.rising as f64 * rise + t.falling as f64 * fall
}

/// LUT energy for a component named by string.
pub fn digital_power(kind: &str, t: Transitions, tech: &TechnologyModel) -> Result<f64> {
    Ok(digital_energy(kind.parse()?, t, tech))
}
