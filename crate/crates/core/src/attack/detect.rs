use std::ops::Range;

use rayon::prelude::*;

use super::HwKnowledge;
use crate::error::{Error, Result};
use crate::trace::PowerTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Threshold is `idle_mean + sigma_k * idle_std`.
    pub sigma_k: f64,
    /// On a noiseless idle segment the threshold is raised to
    /// `idle_mean + kappa * (peak - idle_mean)`.
    pub kappa: f64,
    /// Length of the leading idle segment used for statistics, seconds.
    pub idle_window: f64,
    /// Minimum folding significance for a bit-period lattice to be accepted.
    pub min_significance: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            sigma_k: 4.0,
            kappa: 0.3,
            idle_window: 500e-9,
            min_significance: 6.0,
        }
    }
}

/// Per-tile quantities read off a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TileFeatures {
    pub tile_id: usize,
    /// Start of the first analog read, seconds.
    pub start_time: f64,
    /// End of the last input bit, seconds.
    pub end_time: f64,
    pub vmm_count: usize,
    /// Conversions per ADC per input bit.
    pub adc_exec_count: usize,
    /// Mean power over the stable-read windows, above the idle level, watts.
    pub mean_analog_power: f64,
    /// Folding significance of the detected bit period.
    pub significance: f64,
}

/// Bit-period lattice fitted to a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub conversions: usize,
    /// Bit period, seconds.
    pub period: f64,
    /// Position of the slot-0 read window, in (fractional) samples.
    pub phase: f64,
    /// Plateau power above idle at every slot, watts.
    pub amplitudes: Vec<f64>,
    /// Slots that carry an analog read.
    pub active: Range<usize>,
    pub idle_mean: f64,
    /// Mean of `amplitudes` over the active slots.
    pub active_mean: f64,
    pub significance: f64,
}

impl Lattice {
    /// Offset of slot `k` from the trace start, seconds.
    pub fn slot_offset(&self, k: usize, rate: f64) -> f64 {
        self.phase / rate + k as f64 * self.period
    }
}

fn smoothing_len(trace: &PowerTrace, hw: &HwKnowledge) -> usize {
    ((hw.settle_time * trace.sample_rate).round() as usize).max(1)
}

/// Moving average over `n` samples, aligned to the window start.
fn boxcar(x: &[f64], n: usize) -> Vec<f64> {
    if n <= 1 {
        return x.to_vec();
    }
    if x.len() < n {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(x.len() - n + 1);
    let mut acc: f64 = x[..n].iter().sum();
    out.push(acc / n as f64);
    for i in n..x.len() {
        acc += x[i] - x[i - n];
        out.push(acc / n as f64);
    }
    out
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}

struct Smoothed {
    s: Vec<f64>,
    n: usize,
    idle_mean: f64,
    idle_std: f64,
    peak: f64,
}

fn smoothed(trace: &PowerTrace, hw: &HwKnowledge, det: &DetectorConfig) -> Result<Smoothed> {
    if trace.samples.is_empty() {
        return Err(Error::Attack(format!(
            "tile {}: empty trace",
            trace.tile_id
        )));
    }
    let n = smoothing_len(trace, hw);
    let s = boxcar(&trace.samples, n);
    if s.is_empty() {
        return Err(Error::Attack(format!(
            "tile {}: trace shorter than one settle window",
            trace.tile_id
        )));
    }
    let idle_len = ((det.idle_window * trace.sample_rate).round() as usize).clamp(2, s.len());
    let (idle_mean, idle_std) = mean_std(&s[..idle_len]);
    let peak = s.iter().copied().fold(f64::MIN, f64::max);
    Ok(Smoothed {
        s,
        n,
        idle_mean,
        idle_std,
        peak,
    })
}

fn noiseless(sm: &Smoothed) -> bool {
    sm.idle_std <= 1e-3 * (sm.peak - sm.idle_mean).abs()
}

fn threshold(sm: &Smoothed, det: &DetectorConfig) -> f64 {
    let base = sm.idle_mean + det.sigma_k * sm.idle_std;
    if noiseless(sm) {
        base.max(sm.idle_mean + det.kappa * (sm.peak - sm.idle_mean))
    } else {
        base
    }
}

/// Runs of the settle-smoothed trace above the idle threshold, as absolute
/// `(start, end)` times. Runs shorter than half a settle window are dropped.
pub fn threshold_runs(
    trace: &PowerTrace,
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<Vec<(f64, f64)>> {
    let sm = smoothed(trace, hw, det)?;
    if sm.peak <= sm.idle_mean {
        return Ok(Vec::new());
    }
    let theta = threshold(&sm, det);
    let min_run = sm.n.div_ceil(2);
    let dt = trace.dt();
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in sm.s.iter().chain(std::iter::once(&f64::MIN)).enumerate() {
        match (v > theta, start) {
            (true, None) => start = Some(i),
            (false, Some(s0)) => {
                if i - s0 >= min_run {
                    runs.push((trace.t0 + s0 as f64 * dt, trace.t0 + i as f64 * dt));
                }
                start = None;
            }
            _ => {}
        }
    }
    Ok(runs)
}

struct Fold {
    conversions: usize,
    phase: f64,
    significance: f64,
}

fn fold(s: &[f64], period_samples: f64, noise: f64) -> (f64, f64) {
    let bins = (period_samples.round() as usize).max(2);
    let mut sum = vec![0.0; bins];
    let mut cnt = vec![0usize; bins];
    let scale = bins as f64 / period_samples;
    for (i, &v) in s.iter().enumerate() {
        let ph = i as f64 % period_samples;
        let b = ((ph * scale) as usize).min(bins - 1);
        sum[b] += v;
        cnt[b] += 1;
    }
    let profile: Vec<f64> = sum
        .iter()
        .zip(&cnt)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mean = profile.iter().sum::<f64>() / bins as f64;
    let (best, &peak) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least two bins");
    let z = (peak - mean) * (cnt[best] as f64).sqrt() / noise;
    (z, (best as f64 + 0.5) / scale)
}

/// Overlap of every sample with the window `[start, start + width)`.
fn overlaps(start: f64, width: f64, len: usize) -> impl Iterator<Item = (usize, f64)> {
    let first = start.floor().max(0.0) as usize;
    let last = ((start + width).ceil().max(0.0) as usize).min(len);
    (first..last).filter_map(move |j| {
        let o = (start + width).min(j as f64 + 1.0) - start.max(j as f64);
        (o > 0.0).then_some((j, o))
    })
}

/// Least-squares amplitude of a box pulse over `[start, start + width)`.
fn box_amplitude(x: &[f64], start: f64, width: f64, idle: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (j, o) in overlaps(start, width, x.len()) {
        num += o * (x[j] - idle);
        den += o * o;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Matched-filter response of a box pulse, normalised to unit noise gain.
fn box_response(x: &[f64], start: f64, width: f64, idle: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (j, o) in overlaps(start, width, x.len()) {
        num += o * (x[j] - idle);
        den += o * o;
    }
    if den > 0.0 {
        num / den.sqrt()
    } else {
        0.0
    }
}

/// Contiguous run of whole input vectors (`bits` slots each) with the
/// largest summed excess over half the active level.
fn fit_extent(a: &[f64], bits: usize) -> Option<(Range<usize>, f64)> {
    if a.len() < bits || bits == 0 {
        return None;
    }
    // any active tile reads at least one whole vector
    let mut sorted = a.to_vec();
    sorted.sort_by(|x, y| y.total_cmp(x));
    let mut high = sorted[..bits].iter().sum::<f64>() / bits as f64;
    let mut best_seg = None;
    for _ in 0..3 {
        if !(high > 0.0) {
            return None;
        }
        let tau = 0.5 * high;
        let mut prefix = Vec::with_capacity(a.len() + 1);
        prefix.push(0.0);
        for v in a {
            prefix.push(prefix.last().unwrap() + v - tau);
        }
        let mut best = (0.0, None);
        for len in (bits..=a.len()).step_by(bits) {
            for k in 0..=a.len() - len {
                let sum = prefix[k + len] - prefix[k];
                if sum > best.0 {
                    best = (sum, Some(k..k + len));
                }
            }
        }
        let seg = best.1?;
        high = a[seg.clone()].iter().sum::<f64>() / seg.len() as f64;
        best_seg = Some(seg);
    }
    best_seg.map(|s| (s, high))
}

/// Fits the bit-period lattice: the ADC conversion count whose bit period
/// folds the trace most coherently, the sub-sample phase of the read
/// windows, and the run of slots that carry reads.
pub fn fit_lattice(
    trace: &PowerTrace,
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<Option<Lattice>> {
    let sm = smoothed(trace, hw, det)?;
    if sm.peak <= sm.idle_mean {
        return Ok(None);
    }
    let rate = trace.sample_rate;
    let noise = sm.idle_std + 1e-6 * (sm.peak - sm.idle_mean) + f64::MIN_POSITIVE;
    let best = (1..=hw.max_conversions())
        .into_par_iter()
        .map(|c| {
            let (z, phase) = fold(&sm.s, hw.bit_period(c) * rate, noise);
            Fold {
                conversions: c,
                phase,
                significance: z,
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(None::<Fold>, |acc, f| match acc {
            Some(a) if a.significance >= f.significance => Some(a),
            _ => Some(f),
        })
        .expect("at least one candidate");
    if best.significance < det.min_significance {
        return Ok(None);
    }
    let x = &trace.samples;
    let idle_len = ((det.idle_window * rate).round() as usize).clamp(2, x.len());
    let (idle, _) = mean_std(&x[..idle_len]);
    let period = hw.bit_period(best.conversions);
    let step = period * rate;
    let width = (hw.settle_time * rate).max(1.0);
    let coarse = best.phase % step;
    let slots = |phase: f64| ((x.len() as f64 - phase) / step).ceil().max(0.0) as usize;

    // sub-sample phase: best summed matched-filter response over all slots
    let phase = (-12..=12)
        .map(|d| coarse + d as f64 / 8.0)
        .map(|ph| {
            let r: f64 = (0..slots(ph))
                .map(|k| box_response(x, ph + k as f64 * step, width, idle))
                .sum();
            (ph, r)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(ph, _)| ph)
        .expect("non-empty offset grid");
    let phase = if phase < 0.0 { phase + step } else { phase };
    let amplitudes: Vec<f64> = (0..slots(phase))
        .map(|k| box_amplitude(x, phase + k as f64 * step, width, idle))
        .collect();
    let Some((active, active_mean)) = fit_extent(&amplitudes, hw.input_bits as usize) else {
        return Ok(None);
    };
    Ok(Some(Lattice {
        conversions: best.conversions,
        period,
        phase,
        amplitudes,
        active,
        idle_mean: idle,
        active_mean,
        significance: best.significance,
    }))
}

/// Stable-read windows, as absolute `(start, end)` times in order.
///
/// Returns an empty list when no sample rises above the idle threshold or no
/// bit-period structure can be found.
pub fn detect_analog_ops(
    trace: &PowerTrace,
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<Vec<(f64, f64)>> {
    if threshold_runs(trace, hw, det)?.is_empty() {
        return Ok(Vec::new());
    }
    let Some(lat) = fit_lattice(trace, hw, det)? else {
        return Ok(Vec::new());
    };
    Ok(lat
        .active
        .clone()
        .map(|k| {
            let t = trace.t0 + lat.slot_offset(k, trace.sample_rate);
            (t, t + hw.settle_time)
        })
        .collect())
}

pub fn extract_features(
    trace: &PowerTrace,
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<TileFeatures> {
    let fail = |why: &str| Error::Attack(format!("tile {}: {why}", trace.tile_id));
    if threshold_runs(trace, hw, det)?.is_empty() {
        return Err(fail("no analog activity above the idle threshold"));
    }
    let lat = fit_lattice(trace, hw, det)?.ok_or_else(|| fail("no bit-period structure found"))?;
    let bits = hw.input_bits as usize;
    let vmm_count = (lat.active.len() + bits / 2) / bits;
    if vmm_count == 0 {
        return Err(fail("fewer analog windows than one input vector"));
    }
    let rate = trace.sample_rate;
    Ok(TileFeatures {
        tile_id: trace.tile_id,
        start_time: trace.t0 + lat.slot_offset(lat.active.start, rate),
        end_time: trace.t0 + lat.slot_offset(lat.active.end - 1, rate) + lat.period,
        vmm_count,
        adc_exec_count: lat.conversions,
        mean_analog_power: lat.active_mean,
        significance: lat.significance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Synthetic tile: `reads` bit windows of `power` watts, period T(c).
    fn pulses(c: usize, reads: usize, power: f64, rate: f64) -> PowerTrace {
        let hw = HwKnowledge::default();
        let lead = (1e-6 * rate) as usize;
        let period = hw.bit_period(c);
        let n = lead * 2 + (reads as f64 * period * rate).ceil() as usize;
        let mut samples = vec![0.0; n];
        for r in 0..reads {
            let t = r as f64 * period;
            let a = lead + (t * rate).round() as usize;
            let b = lead + ((t + hw.settle_time) * rate).round() as usize;
            for s in &mut samples[a..b.max(a + 1)] {
                *s += power;
            }
        }
        PowerTrace {
            tile_id: 0,
            sample_rate: rate,
            t0: 0.0,
            samples,
        }
    }

    #[test]
    fn idle_trace_has_no_windows() {
        let hw = HwKnowledge::default();
        let t = PowerTrace {
            tile_id: 0,
            sample_rate: 1e10,
            t0: 0.0,
            samples: vec![0.0; 10_000],
        };
        assert!(detect_analog_ops(&t, &hw, &DetectorConfig::default())
            .unwrap()
            .is_empty());
        assert!(extract_features(&t, &hw, &DetectorConfig::default()).is_err());
        let empty = PowerTrace {
            samples: vec![],
            ..t
        };
        assert!(detect_analog_ops(&empty, &hw, &DetectorConfig::default()).is_err());
    }

    #[test]
    fn recovers_conversion_count_and_reads() {
        let hw = HwKnowledge::default();
        for (c, reads) in [(16, 8), (12, 8), (3, 80), (1, 40), (8, 16)] {
            let t = pulses(c, reads, 5e-3, 1e10);
            let f = extract_features(&t, &hw, &DetectorConfig::default()).unwrap();
            assert_eq!(f.adc_exec_count, c);
            assert_eq!(f.vmm_count, reads / 8);
            assert!((f.start_time - 1e-6).abs() < 1e-10, "{}", f.start_time);
            assert!((f.mean_analog_power - 5e-3).abs() < 1e-9);
            assert_eq!(
                detect_analog_ops(&t, &hw, &DetectorConfig::default())
                    .unwrap()
                    .len(),
                reads
            );
        }
    }

    #[test]
    fn threshold_runs_on_clean_pulses() {
        let hw = HwKnowledge::default();
        let t = pulses(4, 24, 2e-3, 1e10);
        assert_eq!(
            threshold_runs(&t, &hw, &DetectorConfig::default())
                .unwrap()
                .len(),
            24
        );
    }

    #[test]
    fn extent_is_whole_vectors() {
        let mut a = vec![0.0; 40];
        for v in &mut a[5..21] {
            *v = 1.0;
        }
        a[5] = 0.3; // weak first read still belongs to the vector
        assert_eq!(fit_extent(&a, 8).unwrap().0, 5..21);
        assert!(fit_extent(&[0.0; 16], 8).is_none());
    }

    #[test]
    fn box_amplitude_recovers_offset_pulse() {
        let x = [0.0, 0.5, 1.0, 0.25, 0.0];
        assert!((box_amplitude(&x, 1.5, 1.75, 0.0) - 1.0).abs() < 1e-12);
    }
}
