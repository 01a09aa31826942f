//! Charge-redistribution SAR ADC: conversion and per-step DAC switching energy.

use super::TechnologyModel;
use crate::error::{Error, Result};

pub const ADC_BITS: usize = 8;

/// Binary-weighted capacitor `C_n = 2^(8-n) * c_unit`, `n` in `1..=8`.
pub fn unit_capacitance(n: usize, tech: &TechnologyModel) -> f64 {
    (1u64 << (ADC_BITS - n)) as f64 * tech.c_unit
}

/// Energy drawn from `V_ref` in step `n` (1-based).
///
/// `delta_vx` is the change of the comparator node during this step and
/// `codes` the decided bits `D_1..D_{n-1}`. The value is signed; a negative
/// result is charge returned to the reference.
pub fn sar_step_energy(
    n: usize,
    delta_vx: f64,
    codes: &[bool],
    tech: &TechnologyModel,
) -> Result<f64> {
    if !(1..=ADC_BITS).contains(&n) {
        return Err(Error::Simulation(format!(
            "SAR step {n} outside 1..={ADC_BITS}"
        )));
    }
    if codes.len() < n - 1 {
        return Err(Error::Simulation(format!(
            "step {n} needs {} decided bits, got {}",
            n - 1,
            codes.len()
        )));
    }
    let v_ref = tech.v_ref;
    let c_n = unit_capacitance(n, tech);
    if n == 1 {
        return Ok(-c_n * v_ref * (delta_vx - v_ref));
    }
    let on: f64 = codes[..n - 1]
        .iter()
        .enumerate()
        .filter(|(_, d)| **d)
        .map(|(i, _)| unit_capacitance(i + 1, tech))
        .sum();
    Ok(-v_ref * (delta_vx * on + c_n * (delta_vx - v_ref)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SarConversion {
    pub code: u8,
    /// Signed energy of each step, joules.
    pub step_energies: [f64; ADC_BITS],
    pub duration: f64,
}

impl SarConversion {
    /// Energy as seen by a supply probe: negative steps floored at zero.
    pub fn recorded_energies(&self) -> [f64; ADC_BITS] {
        self.step_energies.map(|e| e.max(0.0))
    }

    pub fn total_signed(&self) -> f64 {
        self.step_energies.iter().sum()
    }
}

/// Successive approximation of `v_in` (clamped into `[0, V_ref]`).
///
/// Each trial switches `C_n` to `V_ref`; a rejected trial returns `C_n` to
/// ground at the start of the next step, so `delta_vx` already contains both
/// switch movements.
pub fn sar_convert(v_in: f64, tech: &TechnologyModel) -> SarConversion {
    let v_ref = tech.v_ref;
    let duration = ADC_BITS as f64 * tech.adc_step_time;
    if v_ref <= 0.0 {
        return SarConversion {
            code: 0,
            step_energies: [0.0; ADC_BITS],
            duration,
        };
    }
    let v = v_in.clamp(0.0, v_ref);
    let code = ((v / v_ref) * 256.0).floor().clamp(0.0, 255.0) as u8;
    let c_total = tech.c_sample;

    let mut decided = [false; ADC_BITS];
    let mut energies = [0.0; ADC_BITS];
    let mut on = 0.0;
    let mut vx = -v;
    for n in 1..=ADC_BITS {
        let trial = on + unit_capacitance(n, tech);
        let vx_new = -v + v_ref * trial / c_total;
        // codes D_1..D_{n-1} are final before step n
        energies[n - 1] =
            sar_step_energy(n, vx_new - vx, &decided[..n - 1], tech).expect("step in range");
        let bit = code >> (ADC_BITS - n) & 1 == 1;
        decided[n - 1] = bit;
        if bit {
            on = trial;
        }
        vx = vx_new;
    }
    SarConversion {
        code,
        step_energies: energies,
        duration,
    }
}

/// Total signed conversion energy of `v_in`.
pub fn conversion_energy(v_in: f64, tech: &TechnologyModel) -> f64 {
    sar_convert(v_in, tech).total_signed()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent switch-level model: tracks the bottom-plate voltage of
    /// every capacitor (plus the unit dummy) and integrates the charge that
    /// flows out of the V_ref terminal at each switching event.
    fn charge_oracle(v_in: f64, tech: &TechnologyModel) -> (u8, Vec<f64>) {
        let v_ref = tech.v_ref;
        let mut caps: Vec<f64> = (1..=8)
            .map(|n| (1u64 << (8 - n)) as f64 * tech.c_unit)
            .collect();
        caps.push(tech.c_unit);
        let c_total: f64 = caps.iter().sum();
        // sampling: bottoms at v_in, top grounded; then bottoms grounded, top floats
        let q_top = -c_total * v_in;
        let mut bottom = vec![0.0; caps.len()];
        let top = |bottom: &[f64]| {
            (q_top + caps.iter().zip(bottom).map(|(c, b)| c * b).sum::<f64>()) / c_total
        };
        let mut vx = top(&bottom);
        let mut code = 0u8;
        let mut energies = Vec::new();
        for n in 0..8 {
            let before: Vec<f64> = bottom.clone();
            if n > 0 && code & (1 << (8 - n)) == 0 {
                bottom[n - 1] = 0.0;
            }
            bottom[n] = v_ref;
            let vx_new = top(&bottom);
            let mut q_from_ref = 0.0;
            for i in 0..caps.len() {
                if bottom[i] == v_ref {
                    let q_old = caps[i] * (before[i] - vx);
                    let q_new = caps[i] * (bottom[i] - vx_new);
                    q_from_ref += q_new - q_old;
                }
            }
            energies.push(v_ref * q_from_ref);
            if vx_new <= 0.0 {
                code |= 1 << (7 - n);
            }
            vx = vx_new;
        }
        (code, energies)
    }

    #[test]
    fn step_one_example() {
        let tech = TechnologyModel::default();
        let e = sar_step_energy(1, 0.45, &[], &tech).unwrap();
        assert!((e - 51.84e-15).abs() < 1e-24, "{e}");
    }

    #[test]
    fn zero_reference_means_zero_energy() {
        let tech = TechnologyModel {
            v_ref: 0.0,
            ..TechnologyModel::default()
        };
        for n in 1..=8 {
            assert_eq!(sar_step_energy(n, 0.3, &[true; 7], &tech).unwrap(), 0.0);
        }
        assert!(sar_convert(0.4, &tech)
            .step_energies
            .iter()
            .all(|&e| e == 0.0));
    }

    #[test]
    fn step_index_checked() {
        let tech = TechnologyModel::default();
        assert!(sar_step_energy(0, 0.1, &[], &tech).is_err());
        assert!(sar_step_energy(9, 0.1, &[false; 8], &tech).is_err());
    }

    #[test]
    fn codes_at_extremes() {
        let tech = TechnologyModel::default();
        assert_eq!(sar_convert(0.0, &tech).code, 0);
        assert_eq!(sar_convert(tech.v_ref * (1.0 - 1e-9), &tech).code, 255);
        assert_eq!(sar_convert(5.0, &tech).code, 255);
        assert_eq!(sar_convert(-1.0, &tech).code, 0);
    }

    #[test]
    fn matches_charge_oracle_for_every_code() {
        let tech = TechnologyModel::default();
        for k in 0..256u32 {
            let v = (k as f64 + 0.5) / 256.0 * tech.v_ref;
            let conv = sar_convert(v, &tech);
            let (code, oracle) = charge_oracle(v, &tech);
            assert_eq!(conv.code as u32, k);
            assert_eq!(code as u32, k);
            for (a, b) in conv.step_energies.iter().zip(&oracle) {
                assert!(
                    (a - b).abs() <= 1e-9 * b.abs().max(1e-18),
                    "code {k}: {a} vs {b}"
                );
            }
            let total: f64 = oracle.iter().sum();
            assert!((conv.total_signed() - total).abs() <= 1e-9 * total.abs());
        }
    }

    #[test]
    fn energy_envelope_decreases_with_code() {
        let tech = TechnologyModel::default();
        let e: Vec<f64> = (0..256)
            .map(|k| conversion_energy((k as f64 + 0.5) / 256.0 * 0.9, &tech))
            .collect();
        let low: f64 = e[..32].iter().sum::<f64>() / 32.0;
        let high: f64 = e[224..].iter().sum::<f64>() / 32.0;
        assert!(low > high, "{low} vs {high}");
        // closed forms in units of c_unit * V_ref^2
        let unit = tech.c_unit * tech.v_ref * tech.v_ref;
        let code0 = 64.0
            + (2..=8)
                .map(|n| {
                    let c = (1u64 << (8 - n)) as f64;
                    c + c * c / 256.0
                })
                .sum::<f64>();
        let code255 = 64.0
            + (2..=8)
                .map(|n| {
                    let c = (1u64 << (8 - n)) as f64;
                    c * c / 256.0
                })
                .sum::<f64>();
        assert!((e[0] / unit - code0).abs() < 1e-9 * code0);
        assert!((e[255] / unit - code255).abs() < 1e-9 * code255);
    }

    proptest! {
        #[test]
        fn monotone_codes(a in 0.0f64..0.9, b in 0.0f64..0.9) {
            let tech = TechnologyModel::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sar_convert(lo, &tech).code <= sar_convert(hi, &tech).code);
        }
    }
}
