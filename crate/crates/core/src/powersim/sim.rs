use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::analog::{array_read_event, partial_sum_units, subtract_and_sample};
use super::digital::{bit_transitions, digital_energy, DigitalKind, Transitions};
use super::sar::{sar_convert, SarConversion, ADC_BITS};
use super::{SimulationOptions, TechnologyModel};
use crate::error::{Error, Result};
use crate::mapper::{im2col_inputs, layer_matrix_dims, TileConfig, TileMapping, COLS_PER_WEIGHT};
use crate::netspec::{
    finish_vmm_layer, max_pool, propagate_shapes, Activation, Inference, LayerOutput, LayerSpec,
    NetworkSpec,
};
use crate::trace::PowerTrace;

/// Input precision of the bit-serial drivers.
const INPUT_BITS: u32 = 8;
/// Trace windows start and end on multiples of this many native samples.
const TRACE_ALIGN_SAMPLES: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Transient,
    ArrayRead,
    RowDrivers,
    AdcConversion,
    ShiftAdd,
    Register,
    Relu,
    MaxPool,
    Router,
}

impl EventKind {
    pub fn name(self) -> &'static str {
        match self {
            EventKind::Transient => "transient",
            EventKind::ArrayRead => "array_read",
            EventKind::RowDrivers => "row_drivers",
            EventKind::AdcConversion => "adc_conversion",
            EventKind::ShiftAdd => "shift_add",
            EventKind::Register => "register",
            EventKind::Relu => "relu",
            EventKind::MaxPool => "maxpool",
            EventKind::Router => "router",
        }
    }
}

/// Ground-truth annotation of one energy-consuming activity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub tile_id: usize,
    pub kind: EventKind,
    /// ADC index for conversions and shift-adds, 0 otherwise.
    pub lane: u16,
    pub start_ps: u64,
    pub end_ps: u64,
    /// Recorded (non-negative) energy, joules.
    pub energy: f64,
}

impl Event {
    pub fn start(&self) -> f64 {
        self.start_ps as f64 * 1e-12
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn for_tile(&self, tile: usize) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.tile_id == tile)
    }

    pub fn count(&self, tile: usize, kind: EventKind) -> usize {
        self.for_tile(tile).filter(|e| e.kind == kind).count()
    }

    pub fn total_energy(&self) -> f64 {
        self.events.iter().map(|e| e.energy).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tile,kind,lane,start_s,end_s,energy_j\n");
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.tile_id,
                e.kind.name(),
                e.lane,
                e.start_ps as f64 * 1e-12,
                e.end_ps as f64 * 1e-12,
                e.energy
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_csv().as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    /// One trace per tile, ordered by tile id. Empty when traces are not recorded.
    pub traces: Vec<PowerTrace>,
    /// Per-image layer outputs.
    pub outputs: Vec<Inference>,
    pub events: EventLog,
}

#[derive(Debug, Clone, Copy)]
struct Deposit {
    start_ps: u64,
    dur_ps: u64,
    energy: f64,
}

#[derive(Debug, Clone, Default)]
struct TileRecord {
    deposits: Vec<Deposit>,
    events: Vec<Event>,
}

impl TileRecord {
    fn push(
        &mut self,
        tile_id: usize,
        kind: EventKind,
        lane: u16,
        start_ps: u64,
        dur_ps: u64,
        energy: f64,
    ) {
        self.deposits.push(Deposit {
            start_ps,
            dur_ps,
            energy,
        });
        self.events.push(Event {
            tile_id,
            kind,
            lane,
            start_ps,
            end_ps: start_ps + dur_ps,
            energy,
        });
    }
}

/// Timing constants in integer picoseconds.
#[derive(Debug, Clone, Copy)]
struct Clock {
    sample: u64,
    settle: u64,
    step: u64,
    digital: u64,
}

impl Clock {
    fn new(tech: &TechnologyModel, opts: &SimulationOptions) -> Result<Self> {
        let ps = |s: f64| (s * 1e12).round() as u64;
        let sample_ps = 1e12 / opts.sample_rate;
        if (sample_ps - sample_ps.round()).abs() > 1e-9 || sample_ps.round() < 1.0 {
            return Err(Error::Config(format!(
                "sample rate {} Sa/s must divide 1e12 (whole picoseconds per sample)",
                opts.sample_rate
            )));
        }
        Ok(Self {
            sample: sample_ps.round() as u64,
            settle: ps(tech.settle_time),
            step: ps(tech.adc_step_time),
            digital: ps(tech.digital_period()),
        })
    }
}

/// Per-tile state that persists across input vectors.
#[derive(Debug, Clone)]
struct TileState {
    out_reg: Vec<i64>,
    record: TileRecord,
}

struct TileRun {
    end_ps: u64,
    /// `[vector][local output]`
    partials: Vec<Vec<i64>>,
}

struct Ctx<'a> {
    cfg: &'a TileConfig,
    tech: &'a TechnologyModel,
    opts: &'a SimulationOptions,
    clock: Clock,
    dummy_conversion: SarConversion,
}

fn run_tile(
    tile: &TileMapping,
    vectors: &[Vec<u8>],
    start_ps: u64,
    state: &mut TileState,
    ctx: &Ctx,
) -> TileRun {
    let (cfg, tech, clk) = (ctx.cfg, ctx.tech, ctx.clock);
    let record = ctx.opts.record_traces;
    let pairs = tile.output_pairs();
    let lanes = cfg.adc_count;
    let slots = if ctx.opts.pad_adc {
        cfg.max_conversions()
    } else {
        pairs.div_ceil(lanes)
    };
    let id = tile.tile_id;
    let rows = tile.row_offset..tile.row_offset + tile.used_rows;
    let drivers = tech.row_driver_power * tile.used_rows as f64;
    let dk = DigitalKind::ShiftAdd;

    let mut t = start_ps;
    let mut partials = Vec::with_capacity(vectors.len());
    let mut bits = vec![false; tile.used_rows];
    for vector in vectors {
        let x = &vector[rows.clone()];
        let mut acc = vec![0i64; pairs];
        for b in (0..INPUT_BITS).rev() {
            for (bit, &xi) in bits.iter_mut().zip(x) {
                *bit = (xi >> b) & 1 == 1;
            }
            let ev = array_read_event(tile, &bits, tech);
            if record {
                let rec = &mut state.record;
                if ev.transient_energy > 0.0 {
                    rec.push(
                        id,
                        EventKind::Transient,
                        0,
                        t,
                        clk.sample,
                        ev.transient_energy,
                    );
                }
                rec.push(
                    id,
                    EventKind::ArrayRead,
                    0,
                    t,
                    clk.settle,
                    ev.static_power * tech.settle_time,
                );
                rec.push(
                    id,
                    EventKind::RowDrivers,
                    0,
                    t,
                    clk.settle,
                    drivers * tech.settle_time,
                );
            }
            let adc_start = t + clk.settle;
            for slot in 0..slots {
                let slot_start = adc_start + slot as u64 * ADC_BITS as u64 * clk.step;
                let slot_end = slot_start + ADC_BITS as u64 * clk.step;
                for lane in 0..lanes {
                    let p = slot * lanes + lane;
                    let conv;
                    let conv_ref = if p < pairs {
                        let (ip, ineg) = ev.pair_currents[p];
                        let partial = partial_sum_units(ip, ineg, cfg, tech);
                        let next = (acc[p] << 1) + partial;
                        if record {
                            let tr = bit_transitions(acc[p], next);
                            let e = digital_energy(dk, tr, tech);
                            state.record.push(
                                id,
                                EventKind::ShiftAdd,
                                lane as u16,
                                slot_end,
                                clk.digital,
                                e,
                            );
                        }
                        acc[p] = next;
                        if !record {
                            continue;
                        }
                        conv = sar_convert(subtract_and_sample(ip, ineg, tech), tech);
                        &conv
                    } else if ctx.opts.pad_adc {
                        if !record {
                            continue;
                        }
                        &ctx.dummy_conversion
                    } else {
                        continue;
                    };
                    let energies = conv_ref.recorded_energies();
                    for (s, e) in energies.iter().enumerate() {
                        state.record.deposits.push(Deposit {
                            start_ps: slot_start + s as u64 * clk.step,
                            dur_ps: clk.step,
                            energy: *e,
                        });
                    }
                    state.record.events.push(Event {
                        tile_id: id,
                        kind: EventKind::AdcConversion,
                        lane: lane as u16,
                        start_ps: slot_start,
                        end_ps: slot_end,
                        energy: energies.iter().sum(),
                    });
                }
            }
            t = adc_start + slots as u64 * ADC_BITS as u64 * clk.step + clk.digital;
        }
        let outs: Vec<i64> = (0..tile.used_cols / COLS_PER_WEIGHT)
            .map(|o| 16 * acc[2 * o] + acc[2 * o + 1])
            .collect();
        if record {
            let mut tr = Transitions::default();
            for (reg, &v) in state.out_reg.iter_mut().zip(&outs) {
                tr += bit_transitions(*reg, v);
                *reg = v;
            }
            let e = digital_energy(DigitalKind::Register, tr, tech);
            state
                .record
                .push(id, EventKind::Register, 0, t - clk.digital, clk.digital, e);
        }
        partials.push(outs);
    }
    TileRun {
        end_ps: t,
        partials,
    }
}

fn scramble_delay(opts: &SimulationOptions, image: usize, tile: usize, clk: Clock) -> u64 {
    let Some(max) = opts.scramble_max_delay else {
        return 0;
    };
    let seed = opts.rng_seed
        ^ 0x5c2a_11ed
        ^ ((image as u64) << 32)
        ^ (tile as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_samples = ((max * 1e12) as u64) / clk.sample;
    rng.random_range(0..=max_samples) * clk.sample
}

fn check_mapping(net: &NetworkSpec, mappings: &[TileMapping], cfg: &TileConfig) -> Result<()> {
    for l in net.vmm_layers() {
        let (rows, cols) = layer_matrix_dims(net, l)?;
        let tiles: Vec<_> = mappings.iter().filter(|t| t.layer_id == l).collect();
        if tiles.is_empty() {
            return Err(Error::Simulation(format!("layer {l} has no mapped tiles")));
        }
        let covered_cols: usize = tiles
            .iter()
            .filter(|t| t.grid_pos.0 == 0)
            .map(|t| t.used_cols)
            .sum();
        let covered_rows: usize = tiles
            .iter()
            .filter(|t| t.grid_pos.1 == 0)
            .map(|t| t.used_rows)
            .sum();
        if covered_rows != rows || covered_cols != cols {
            return Err(Error::Simulation(format!(
                "layer {l}: tiles cover {covered_rows}x{covered_cols}, layer needs {rows}x{cols}"
            )));
        }
    }
    for t in mappings {
        if !net.layers.get(t.layer_id).is_some_and(|l| l.is_vmm()) {
            return Err(Error::Simulation(format!(
                "tile {} refers to non-VMM layer {}",
                t.tile_id, t.layer_id
            )));
        }
        if t.array_rows != cfg.array_rows || t.array_cols != cfg.array_cols {
            return Err(Error::Simulation(format!(
                "tile {} does not match the tile configuration",
                t.tile_id
            )));
        }
    }
    Ok(())
}

/// Runs every image through the mapped network, serialising layers and images.
pub fn simulate_inference(
    mappings: &[TileMapping],
    net: &NetworkSpec,
    images: &[Activation],
    cfg: &TileConfig,
    tech: &TechnologyModel,
    opts: &SimulationOptions,
) -> Result<SimOutput> {
    cfg.validate()?;
    tech.validate(cfg.adc_bits)?;
    if !opts.halt_pipeline {
        return Err(Error::Simulation(
            "pipelined inference is not modelled; enable halt_pipeline".into(),
        ));
    }
    if images.is_empty() {
        return Err(Error::Simulation("no input images".into()));
    }
    check_mapping(net, mappings, cfg)?;
    let shapes = propagate_shapes(net)?;
    let clk = Clock::new(tech, opts)?;
    let ctx = Ctx {
        cfg,
        tech,
        opts,
        clock: clk,
        dummy_conversion: sar_convert(tech.v_dd / 2.0, tech),
    };

    let mut states: Vec<TileState> = mappings
        .iter()
        .map(|t| TileState {
            out_reg: vec![0; t.used_cols / COLS_PER_WEIGHT],
            record: TileRecord::default(),
        })
        .collect();
    let margin = ((opts.idle_margin * 1e12) as u64).div_ceil(clk.sample * TRACE_ALIGN_SAMPLES)
        * clk.sample
        * TRACE_ALIGN_SAMPLES;
    let mut t = margin;
    let mut outputs = Vec::with_capacity(images.len());
    let last_layer = net.layers.len() - 1;

    for (img_idx, image) in images.iter().enumerate() {
        if image.shape != net.input {
            return Err(Error::Simulation(format!(
                "image {img_idx} has shape {}, network expects {}",
                image.shape, net.input
            )));
        }
        let mut act = image.clone();
        let mut layer_outs: Vec<LayerOutput> = Vec::with_capacity(net.layers.len());
        let mut idx = 0;
        while idx < net.layers.len() {
            let layer = net.layers[idx];
            let vectors = match layer {
                LayerSpec::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                } => im2col_inputs(&act, kernel, stride, padding),
                LayerSpec::Fc { .. } => vec![act.data.clone()],
                LayerSpec::Pool { size } => {
                    // leading pool with no producing layer: digital only, no tile activity
                    act = max_pool(&act, size);
                    layer_outs.push(LayerOutput {
                        shape: act.shape,
                        values: act.data.iter().map(|&v| v as i64).collect(),
                    });
                    idx += 1;
                    continue;
                }
            };
            let tile_ids: Vec<usize> = (0..mappings.len())
                .filter(|&i| mappings[i].layer_id == idx)
                .collect();
            let mut picked: Vec<(usize, &mut TileState)> = states
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| mappings[*i].layer_id == idx)
                .collect();
            let runs: Vec<(usize, TileRun)> = picked
                .par_iter_mut()
                .map(|(i, state)| {
                    let tile = &mappings[*i];
                    let start = t + scramble_delay(opts, img_idx, tile.tile_id, clk);
                    (*i, run_tile(tile, &vectors, start, state, &ctx))
                })
                .collect();
            drop(picked);

            let shape = shapes[idx];
            let outs = shape.channels;
            let mut acc = vec![0i64; shape.volume()];
            let pixels = vectors.len();
            for (i, run) in &runs {
                let tile = &mappings[*i];
                let first_out = tile.col_offset / COLS_PER_WEIGHT;
                for (v, row) in run.partials.iter().enumerate() {
                    for (lo, &val) in row.iter().enumerate() {
                        acc[(first_out + lo) * pixels + v] += val;
                    }
                }
            }
            debug_assert_eq!(outs * pixels, acc.len());
            let layer_end = runs.iter().map(|(_, r)| r.end_ps).max().unwrap_or(t);

            // hand-off: ReLU, requantisation, pooling and routing to the next layer
            let mut relu = Transitions::default();
            if idx != last_layer {
                for &v in &acc {
                    relu += bit_transitions(v, v.max(0));
                }
            }
            let (out, next) = finish_vmm_layer(acc, shape, idx == last_layer);
            layer_outs.push(out);
            act = next;
            let mut handoff = tech.handoff_clocks * clk.digital;
            let mut pool_tr = Transitions::default();
            idx += 1;
            while let Some(LayerSpec::Pool { size }) = net.layers.get(idx).copied() {
                pool_tr += pool_transitions(&act, size);
                act = max_pool(&act, size);
                handoff += (act.shape.height * act.shape.width * size * size) as u64 * clk.digital;
                layer_outs.push(LayerOutput {
                    shape: act.shape,
                    values: act.data.iter().map(|&v| v as i64).collect(),
                });
                idx += 1;
            }
            if opts.record_traces {
                let mut router = Transitions::default();
                let mut prev = 0i64;
                for &x in &act.data {
                    router += bit_transitions(prev, x as i64);
                    prev = x as i64;
                }
                let share = tile_ids.len() as f64;
                for (kind, dk, tr) in [
                    (EventKind::Relu, DigitalKind::Relu, relu),
                    (EventKind::MaxPool, DigitalKind::MaxPool, pool_tr),
                    (EventKind::Router, DigitalKind::Router, router),
                ] {
                    let e = digital_energy(dk, tr, tech);
                    if e == 0.0 {
                        continue;
                    }
                    for &i in &tile_ids {
                        states[i].record.push(
                            mappings[i].tile_id,
                            kind,
                            0,
                            layer_end,
                            handoff,
                            e / share,
                        );
                    }
                }
            }
            t = layer_end + handoff;
        }
        outputs.push(Inference { layers: layer_outs });
    }

    let (traces, events) = if opts.record_traces {
        let traces = states
            .par_iter()
            .zip(mappings)
            .map(|(s, tile)| {
                rasterize(
                    tile.tile_id,
                    &s.record.deposits,
                    clk,
                    margin,
                    opts.sample_rate,
                )
            })
            .collect();
        let mut events: Vec<Event> = states.into_iter().flat_map(|s| s.record.events).collect();
        events.sort_by(|a, b| {
            (a.tile_id, a.start_ps, a.kind, a.lane).cmp(&(b.tile_id, b.start_ps, b.kind, b.lane))
        });
        (traces, EventLog { events })
    } else {
        (Vec::new(), EventLog::default())
    };
    Ok(SimOutput {
        traces,
        outputs,
        events,
    })
}

fn pool_transitions(act: &Activation, size: usize) -> Transitions {
    let s = act.shape;
    let mut tr = Transitions::default();
    for c in 0..s.channels {
        for oy in 0..s.height / size {
            for ox in 0..s.width / size {
                let mut reg = 0i64;
                for dy in 0..size {
                    for dx in 0..size {
                        let v = (act.at(c, oy * size + dy, ox * size + dx) as i64).max(reg);
                        tr += bit_transitions(reg, v);
                        reg = v;
                    }
                }
            }
        }
    }
    tr
}

fn rasterize(
    tile_id: usize,
    deposits: &[Deposit],
    clk: Clock,
    margin: u64,
    rate: f64,
) -> PowerTrace {
    let align = clk.sample * TRACE_ALIGN_SAMPLES;
    let (first, last) = deposits.iter().fold((u64::MAX, 0u64), |(lo, hi), d| {
        (lo.min(d.start_ps), hi.max(d.start_ps + d.dur_ps))
    });
    if first == u64::MAX {
        return PowerTrace {
            tile_id,
            sample_rate: rate,
            t0: 0.0,
            samples: vec![0.0; TRACE_ALIGN_SAMPLES as usize],
        };
    }
    let t0 = (first.saturating_sub(margin) / align) * align;
    let end = (last + margin).div_ceil(align) * align;
    let n = ((end - t0) / clk.sample) as usize;
    let mut energy = vec![0.0f64; n];
    for d in deposits {
        if d.energy == 0.0 || d.dur_ps == 0 {
            continue;
        }
        let per_ps = d.energy / d.dur_ps as f64;
        let (s, e) = (d.start_ps - t0, d.start_ps - t0 + d.dur_ps);
        let (i0, i1) = (s / clk.sample, (e - 1) / clk.sample);
        for (i, slot) in energy
            .iter_mut()
            .enumerate()
            .take(i1 as usize + 1)
            .skip(i0 as usize)
        {
            let lo = s.max(i as u64 * clk.sample);
            let hi = e.min((i as u64 + 1) * clk.sample);
            *slot += per_ps * (hi - lo) as f64;
        }
    }
    let samples = energy.into_iter().map(|e| e * rate).collect();
    PowerTrace {
        tile_id,
        sample_rate: rate,
        t0: t0 as f64 * 1e-12,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::map_network;
    use crate::netspec::{infer_reference, synthetic_images, FloatWeights, Shape};

    fn small_net() -> NetworkSpec {
        NetworkSpec::new(
            Shape::new(2, 6, 6),
            vec![
                LayerSpec::conv(4, 3),
                LayerSpec::Pool { size: 2 },
                LayerSpec::Fc { out_features: 6 },
            ],
        )
    }

    fn run(
        net: &NetworkSpec,
        images: usize,
        opts: &SimulationOptions,
    ) -> (Vec<TileMapping>, SimOutput, Vec<Activation>) {
        let cfg = TileConfig::default();
        let q = FloatWeights::random(net, 17)
            .unwrap()
            .quantize(net)
            .unwrap();
        let tiles = map_network(net, &q, &cfg).unwrap();
        let imgs = synthetic_images(net.input, images, 5);
        let out = simulate_inference(&tiles, net, &imgs, &cfg, &TechnologyModel::default(), opts)
            .unwrap();
        for (img, inf) in imgs.iter().zip(&out.outputs) {
            assert_eq!(inf, &infer_reference(net, &q, img).unwrap());
        }
        (tiles, out, imgs)
    }

    #[test]
    fn outputs_match_reference_and_energy_is_conserved() {
        let (_, out, _) = run(&small_net(), 2, &SimulationOptions::default());
        let trace_energy: f64 = out.traces.iter().map(|t| t.energy()).sum();
        let logged = out.events.total_energy();
        assert!(
            ((trace_energy - logged) / logged).abs() < 1e-6,
            "{trace_energy} vs {logged}"
        );
        assert!(out
            .traces
            .iter()
            .all(|t| t.samples.iter().all(|&s| s >= 0.0)));
    }

    #[test]
    fn analog_reads_and_adc_counts() {
        let net = small_net();
        let (tiles, out, _) = run(&net, 1, &SimulationOptions::default());
        // conv: 4x4 output pixels x 8 bits
        assert_eq!(out.events.count(0, EventKind::ArrayRead), 16 * 8);
        assert_eq!(out.events.count(1, EventKind::ArrayRead), 8);
        for t in &tiles {
            let per_adc = out
                .events
                .for_tile(t.tile_id)
                .filter(|e| e.kind == EventKind::AdcConversion && e.lane == 0)
                .count();
            let reads = out.events.count(t.tile_id, EventKind::ArrayRead);
            assert_eq!(per_adc, reads * (t.used_cols / 2).div_ceil(4));
        }
    }

    #[test]
    fn padding_fills_every_adc() {
        let opts = SimulationOptions {
            pad_adc: true,
            ..SimulationOptions::default()
        };
        let (tiles, out, _) = run(&small_net(), 1, &opts);
        for t in &tiles {
            let reads = out.events.count(t.tile_id, EventKind::ArrayRead);
            for lane in 0..4 {
                let n = out
                    .events
                    .for_tile(t.tile_id)
                    .filter(|e| e.kind == EventKind::AdcConversion && e.lane == lane)
                    .count();
                assert_eq!(n, reads * 16);
            }
        }
    }

    #[test]
    fn deterministic_traces() {
        let opts = SimulationOptions {
            scramble_max_delay: Some(200e-9),
            ..SimulationOptions::default()
        };
        let (_, a, _) = run(&small_net(), 1, &opts);
        let (_, b, _) = run(&small_net(), 1, &opts);
        assert_eq!(a.traces, b.traces);
    }

    #[test]
    fn zero_image_has_no_array_power() {
        let net = small_net();
        let cfg = TileConfig::default();
        let q = FloatWeights::random(&net, 17)
            .unwrap()
            .quantize(&net)
            .unwrap();
        let tiles = map_network(&net, &q, &cfg).unwrap();
        let img = Activation::zeros(net.input);
        let out = simulate_inference(
            &tiles,
            &net,
            std::slice::from_ref(&img),
            &cfg,
            &TechnologyModel::default(),
            &SimulationOptions::default(),
        )
        .unwrap();
        assert_eq!(out.outputs[0], infer_reference(&net, &q, &img).unwrap());
        assert!(out
            .events
            .events
            .iter()
            .filter(|e| e.kind == EventKind::ArrayRead)
            .all(|e| e.energy == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = small_net();
        let cfg = TileConfig::default();
        let q = FloatWeights::random(&net, 17)
            .unwrap()
            .quantize(&net)
            .unwrap();
        let tiles = map_network(&net, &q, &cfg).unwrap();
        let tech = TechnologyModel::default();
        let opts = SimulationOptions::default();
        assert!(simulate_inference(&tiles, &net, &[], &cfg, &tech, &opts).is_err());
        assert!(simulate_inference(
            &tiles[..1],
            &net,
            &synthetic_images(net.input, 1, 0),
            &cfg,
            &tech,
            &opts
        )
        .is_err());
        let pipelined = SimulationOptions {
            halt_pipeline: false,
            ..opts
        };
        assert!(simulate_inference(
            &tiles,
            &net,
            &synthetic_images(net.input, 1, 0),
            &cfg,
            &tech,
            &pipelined
        )
        .is_err());
    }
}
