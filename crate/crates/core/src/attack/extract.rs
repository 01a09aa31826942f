use rayon::prelude::*;

use super::detect::{extract_features, DetectorConfig, TileFeatures};
use super::report::{ExtractedArchitecture, ExtractedLayer};
use super::HwKnowledge;
use crate::error::{Error, Result};
use crate::netspec::{conv_output_width, LayerSpec};
use crate::trace::PowerTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
}

/// Tiles that start together, i.e. one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    pub kind: LayerKind,
    /// Ordered by tile id.
    pub tiles: Vec<TileFeatures>,
    pub start: f64,
    pub end: f64,
}

impl LayerGroup {
    /// Most common VMM count across the group's tiles.
    pub fn vmm_count(&self) -> usize {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for t in &self.tiles {
            match counts.iter_mut().find(|(v, _)| *v == t.vmm_count) {
                Some((_, n)) => *n += 1,
                None => counts.push((t.vmm_count, 1)),
            }
        }
        counts
            .iter()
            .max_by_key(|(_, n)| *n)
            .map(|(v, _)| *v)
            .unwrap_or(0)
    }

    pub fn tile_ids(&self) -> Vec<usize> {
        self.tiles.iter().map(|t| t.tile_id).collect()
    }
}

/// Tiles whose start times agree within one serial clock, ordered by start
/// time; tiles inside a group are ordered by id.
pub fn group_by_start(features: &[TileFeatures], hw: &HwKnowledge) -> Vec<Vec<TileFeatures>> {
    let mut sorted = features.to_vec();
    sorted.sort_by(|a, b| {
        a.start_time
            .total_cmp(&b.start_time)
            .then(a.tile_id.cmp(&b.tile_id))
    });
    let tol = hw.serial_period();
    let mut groups: Vec<Vec<TileFeatures>> = Vec::new();
    for f in sorted {
        match groups.last_mut() {
            Some(g) if f.start_time - g[0].start_time <= tol => g.push(f),
            _ => groups.push(vec![f]),
        }
    }
    for g in &mut groups {
        g.sort_by_key(|t| t.tile_id);
    }
    groups
}

/// Layer grouping: FC tiles read exactly one vector; tiles whose start times
/// agree within one serial clock form a layer.
pub fn layer_property_extraction(
    features: &[TileFeatures],
    hw: &HwKnowledge,
) -> Result<Vec<LayerGroup>> {
    if features.is_empty() {
        return Err(Error::Attack("no tiles to group".into()));
    }
    let groups = group_by_start(features, hw);
    groups
        .into_iter()
        .map(|tiles| {
            let fc = tiles.iter().filter(|t| t.vmm_count == 1).count();
            let kind = match fc {
                0 => LayerKind::Conv,
                n if n == tiles.len() => LayerKind::Fc,
                _ => {
                    return Err(Error::Attack(format!(
                        "tiles {:?} start together but disagree on layer type",
                        tiles.iter().map(|t| t.tile_id).collect::<Vec<_>>()
                    )))
                }
            };
            let start = tiles
                .iter()
                .map(|t| t.start_time)
                .fold(f64::INFINITY, f64::min);
            let end = tiles
                .iter()
                .map(|t| t.end_time)
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(LayerGroup {
                kind,
                tiles,
                start,
                end,
            })
        })
        .collect()
}

/// Output size read off one group.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSize {
    pub out: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub partial_tiles: usize,
    pub partial_cols: usize,
    /// No column-partial tile was seen; the layer width is assumed to be an
    /// exact multiple of a tile.
    pub assumed_multiple: bool,
}

/// Tile grid `(rows, cols, assumed)` of a group. Column-partial tiles end
/// each grid row; without any, row-partial tiles (clearly lower analog
/// power) are taken to form the last grid row.
pub fn grid_shape(group: &LayerGroup, hw: &HwKnowledge) -> Result<(usize, usize, bool)> {
    let n = group.tiles.len();
    let full = hw.max_conversions();
    let partial = group
        .tiles
        .iter()
        .filter(|t| t.adc_exec_count < full)
        .count();
    if partial > 0 {
        if !n.is_multiple_of(partial) {
            return Err(Error::Attack(format!(
                "group of {n} tiles with {partial} column-partial tiles is not a rectangular grid"
            )));
        }
        return Ok((partial, n / partial, false));
    }
    let peak = group
        .tiles
        .iter()
        .map(|t| t.mean_analog_power)
        .fold(0.0, f64::max);
    let weak = group
        .tiles
        .iter()
        .filter(|t| t.mean_analog_power < 0.75 * peak)
        .count();
    if weak > 0 && n.is_multiple_of(weak) {
        Ok((n / weak, weak, true))
    } else {
        Ok((1, n, true))
    }
}

/// Output channels / features from conversion counts.
pub fn output_size_extraction(group: &LayerGroup, hw: &HwKnowledge) -> Result<OutputSize> {
    let (rows, cols, assumed) = grid_shape(group, hw)?;
    let full = hw.max_conversions();
    let partial: Vec<&TileFeatures> = group
        .tiles
        .iter()
        .filter(|t| t.adc_exec_count < full)
        .collect();
    let cpw = hw.cols_per_weight();
    if partial.is_empty() {
        return Ok(OutputSize {
            out: cols * hw.array_cols / cpw,
            grid_rows: rows,
            grid_cols: cols,
            partial_tiles: 0,
            partial_cols: 0,
            assumed_multiple: assumed,
        });
    }
    let c = partial[0].adc_exec_count;
    if partial.iter().any(|t| t.adc_exec_count != c) {
        return Err(Error::Attack(format!(
            "column-partial tiles {:?} disagree on ADC conversion count",
            partial.iter().map(|t| t.tile_id).collect::<Vec<_>>()
        )));
    }
    let partial_cols = c * 2 * hw.adc_count;
    let full_col_tiles = group.tiles.len() / partial.len() - 1;
    Ok(OutputSize {
        out: (full_col_tiles * hw.array_cols + partial_cols) / cpw,
        grid_rows: rows,
        grid_cols: cols,
        partial_tiles: partial.len(),
        partial_cols,
        assumed_multiple: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelEstimate {
    pub kernel: usize,
    /// Estimated mapped rows across the whole tile column.
    pub total_rows: f64,
    /// `round(sqrt(total_rows / c_in))` was not itself a candidate.
    pub snapped: bool,
}

/// Summed analog power of each grid row (tiles assigned row-major by id).
fn row_powers(group: &LayerGroup, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            group.tiles[r * cols..(r + 1) * cols]
                .iter()
                .map(|t| t.mean_analog_power)
                .sum()
        })
        .collect()
}

/// Rows mapped across the tile column, from the last row's power relative to
/// the fully mapped rows above it.
pub fn estimate_total_rows(
    group: &LayerGroup,
    rows: usize,
    cols: usize,
    hw: &HwKnowledge,
) -> Result<f64> {
    if rows < 2 {
        return Err(Error::Attack(
            "a single tile row carries no row-count reference".into(),
        ));
    }
    if rows * cols != group.tiles.len() {
        return Err(Error::Attack(format!(
            "{rows}x{cols} grid does not fit {} tiles",
            group.tiles.len()
        )));
    }
    let p = row_powers(group, rows, cols);
    let reference = p[..rows - 1].iter().sum::<f64>() / (rows - 1) as f64;
    if !(reference > 0.0) {
        return Err(Error::Attack("reference row power is not positive".into()));
    }
    Ok((rows as f64 - 1.0 + p[rows - 1] / reference) * hw.array_rows as f64)
}

/// Kernel size from the row-power ratio, snapped to the
/// nearest `K^2 * c_in` over `candidates`.
pub fn kernel_size_extraction(
    group: &LayerGroup,
    grid: (usize, usize),
    c_in: usize,
    hw: &HwKnowledge,
    candidates: &[usize],
) -> Result<KernelEstimate> {
    if c_in == 0 || candidates.is_empty() {
        return Err(Error::Attack(
            "kernel extraction needs c_in >= 1 and a candidate set".into(),
        ));
    }
    let total = estimate_total_rows(group, grid.0, grid.1, hw)?;
    Ok(kernel_from_rows(total, c_in, candidates))
}

/// Candidate whose `K^2 * c_in` is nearest to `total` rows.
pub fn kernel_from_rows(total: f64, c_in: usize, candidates: &[usize]) -> KernelEstimate {
    let raw = (total / c_in as f64).sqrt().round() as usize;
    let kernel = *candidates
        .iter()
        .min_by(|a, b| {
            let da = ((**a * **a * c_in) as f64 - total).abs();
            let db = ((**b * **b * c_in) as f64 - total).abs();
            da.total_cmp(&db).then(a.cmp(b))
        })
        .expect("non-empty candidates");
    KernelEstimate {
        kernel,
        total_rows: total,
        snapped: raw != kernel,
    }
}

/// Analog power of one mapped row, from the fully mapped tile rows of every
/// group that has them. Per-row driver power is the same on every tile.
pub fn row_power_reference(groups: &[LayerGroup], hw: &HwKnowledge) -> Option<f64> {
    groups
        .iter()
        .filter_map(|g| {
            let size = output_size_extraction(g, hw).ok()?;
            let (rows, cols) = (size.grid_rows, size.grid_cols);
            (rows >= 2 && rows * cols == g.tiles.len()).then(|| {
                g.tiles[..(rows - 1) * cols]
                    .iter()
                    .map(|t| t.mean_analog_power)
                    .fold(f64::MIN, f64::max)
            })
        })
        .fold(None, |acc: Option<f64>, p| {
            Some(acc.map_or(p, |a| a.max(p)))
        })
        .map(|p| p / hw.array_rows as f64)
        .filter(|p| *p > 0.0)
}

/// Rows mapped on a single-row group, from the calibrated per-row power.
fn single_row_total(group: &LayerGroup, row_ref: f64) -> f64 {
    group
        .tiles
        .iter()
        .map(|t| t.mean_analog_power)
        .fold(0.0, f64::max)
        / row_ref
}

/// First layer: the input width is public, so `(K, P, S)` follows from the
/// output width `sqrt(vmm_count)`. Minimal padding, then minimal stride,
/// wins among consistent geometries.
pub fn kernel_size_extraction_first_layer(
    vmm_count: usize,
    w_in: usize,
    candidates: &[usize],
) -> Result<(usize, usize, usize)> {
    let w_out = exact_sqrt(vmm_count).ok_or_else(|| {
        Error::Attack(format!("vmm count {vmm_count} is not a square output map"))
    })?;
    let mut found = Vec::new();
    for &k in candidates {
        for p in 0..k {
            for s in 1..=3 {
                if conv_output_width(w_in, k, s, p) == Some(w_out) {
                    found.push((p, s, k));
                }
            }
        }
    }
    found.sort();
    match found.as_slice() {
        [] => Err(Error::Attack(format!(
            "no kernel in {candidates:?} maps width {w_in} to {w_out}"
        ))),
        [(p, s, k), rest @ ..] => {
            if rest.first().is_some_and(|(p2, s2, _)| (p2, s2) == (p, s)) {
                return Err(Error::Attack(format!(
                    "ambiguous first-layer kernel: {found:?}"
                )));
            }
            Ok((*k, *p, *s))
        }
    }
}

pub fn exact_sqrt(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v && r > 0).then_some(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoolCandidate {
    pub padding: usize,
    pub stride: usize,
    pub w_in: usize,
    pub pool: usize,
}

/// Pooling between two convolutions: every `(P, S)` whose implied input width
/// divides the previous output width.
pub fn pool_conv_to_conv(prev_out: usize, next_out: usize, kernel: usize) -> Vec<PoolCandidate> {
    let mut out = Vec::new();
    for padding in 0..=4 {
        for stride in 1..=3 {
            let span = (next_out - 1) * stride + kernel;
            let Some(w_in) = span.checked_sub(2 * padding) else {
                continue;
            };
            if w_in == 0 || !prev_out.is_multiple_of(w_in) {
                continue;
            }
            if conv_output_width(w_in, kernel, stride, padding) == Some(next_out) {
                out.push(PoolCandidate {
                    padding,
                    stride,
                    w_in,
                    pool: prev_out / w_in,
                });
            }
        }
    }
    out
}

/// Pooling between a convolution and a dense layer: `fc_in = N^2 * c_out` with `N` dividing the conv
/// output width; returns `(pool, N)` for the `N` closest to `fc_in`.
pub fn pool_conv_to_fc(conv_out: usize, c_out: usize, fc_in: f64) -> (usize, usize) {
    (1..=conv_out)
        .filter(|n| conv_out.is_multiple_of(*n))
        .map(|n| (conv_out / n, n))
        .min_by(|a, b| {
            let da = ((a.1 * a.1 * c_out) as f64 - fc_in).abs();
            let db = ((b.1 * b.1 * c_out) as f64 - fc_in).abs();
            da.total_cmp(&db)
        })
        .expect("conv_out >= 1")
}

struct Prev {
    kind: LayerKind,
    out: usize,
    width: usize,
    end: f64,
}

pub fn reconstruct_architecture(
    groups: &[LayerGroup],
    hw: &HwKnowledge,
) -> Result<ExtractedArchitecture> {
    if groups.is_empty() {
        return Err(Error::Attack("no layers".into()));
    }
    let mut layers: Vec<ExtractedLayer> = Vec::new();
    let mut prev: Option<Prev> = None;
    let pooled_gap = 2.0 * hw.handoff_time();
    let mut row_ref = row_power_reference(groups, hw);
    for (gi, g) in groups.iter().enumerate() {
        let size = output_size_extraction(g, hw)
            .map_err(|e| Error::Attack(format!("layer {}: {e}", gi + 1)))?;
        let mut notes = vec![format!(
            "out: conversion counts, grid {}x{}, {} column-partial tiles ({} cols)",
            size.grid_rows, size.grid_cols, size.partial_tiles, size.partial_cols
        )];
        if size.assumed_multiple {
            notes.push("out: no column-partial tile, exact multiple of a tile assumed".into());
        }
        let grid = (size.grid_rows, size.grid_cols);
        let gap = prev.as_ref().map(|p| g.start - p.end);
        match g.kind {
            LayerKind::Conv => {
                let width = exact_sqrt(g.vmm_count()).ok_or_else(|| {
                    Error::Attack(format!(
                        "layer {}: vmm count {} is not square",
                        gi + 1,
                        g.vmm_count()
                    ))
                })?;
                let (kernel, padding, stride) = match &prev {
                    None => {
                        let w_in = hw.input.width;
                        if grid.0 >= 2 {
                            let est = kernel_size_extraction(
                                g,
                                grid,
                                hw.input.channels,
                                hw,
                                &[1, 3, 5, 7],
                            )?;
                            notes.push(format!("k: row power ratio, {:.1} rows", est.total_rows));
                            let (p, s) = (0..est.kernel)
                                .flat_map(|p| (1..=3).map(move |s| (p, s)))
                                .find(|&(p, s)| {
                                    conv_output_width(w_in, est.kernel, s, p) == Some(width)
                                })
                                .ok_or_else(|| {
                                    Error::Attack(format!(
                                        "kernel {} cannot map width {w_in} to {width}",
                                        est.kernel
                                    ))
                                })?;
                            (est.kernel, p, s)
                        } else {
                            let cands = [1, 3, 5];
                            let by_power = row_ref.and_then(|r| {
                                let est = kernel_from_rows(
                                    single_row_total(g, r),
                                    hw.input.channels,
                                    &cands,
                                );
                                let (p, s) = (0..est.kernel)
                                    .flat_map(|p| (1..=3).map(move |s| (p, s)))
                                    .find(|&(p, s)| {
                                        conv_output_width(w_in, est.kernel, s, p) == Some(width)
                                    })?;
                                Some((est, p, s))
                            });
                            let (k, p, s) = match by_power {
                                Some((est, p, s)) => {
                                    notes.push(format!(
                                        "k: {:.1} rows from per-row power, width {width} from {w_in}",
                                        est.total_rows
                                    ));
                                    (est.kernel, p, s)
                                }
                                None => {
                                    let kps = kernel_size_extraction_first_layer(
                                        g.vmm_count(),
                                        w_in,
                                        &cands,
                                    )?;
                                    notes.push(format!(
                                        "k: output width {width} from input width {w_in}"
                                    ));
                                    kps
                                }
                            };
                            // its row count is now known: calibrates single-row layers
                            row_ref = row_ref.or_else(|| {
                                let rows = (k * k * hw.input.channels) as f64;
                                Some(single_row_total(g, 1.0) / rows).filter(|r| *r > 0.0)
                            });
                            (k, p, s)
                        }
                    }
                    Some(p) if p.kind == LayerKind::Conv => {
                        let est = match (grid.0, row_ref) {
                            (1, Some(r)) => {
                                let est =
                                    kernel_from_rows(single_row_total(g, r), p.out, &[1, 3, 5, 7]);
                                notes.push(format!(
                                    "k: single tile row, {:.1} rows from per-row power",
                                    est.total_rows
                                ));
                                est
                            }
                            (1, None) => {
                                // geometry only: smallest kernel that any padding/stride/pool explains
                                let k = [1, 3, 5, 7]
                                    .into_iter()
                                    .find(|&k| !pool_conv_to_conv(p.width, width, k).is_empty())
                                    .ok_or_else(|| {
                                        Error::Attack(format!(
                                            "layer {}: no kernel explains {} -> {width}",
                                            gi + 1,
                                            p.width
                                        ))
                                    })?;
                                notes.push("k: single tile row and no row-power reference, smallest consistent kernel assumed".into());
                                KernelEstimate {
                                    kernel: k,
                                    total_rows: f64::NAN,
                                    snapped: false,
                                }
                            }
                            _ => {
                                let est = kernel_size_extraction(g, grid, p.out, hw, &[1, 3, 5, 7])
                                    .map_err(|e| Error::Attack(format!("layer {}: {e}", gi + 1)))?;
                                notes.push(format!(
                                    "k: row power ratio, {:.1} rows",
                                    est.total_rows
                                ));
                                est
                            }
                        };
                        notes.push(format!(
                            "k: c_in {}{}",
                            p.out,
                            if est.snapped {
                                ", snapped to the nearest candidate"
                            } else {
                                ""
                            }
                        ));
                        let cands = pool_conv_to_conv(p.width, width, est.kernel);
                        let want_pool = gap.unwrap_or(0.0) > pooled_gap;
                        let preferred: Vec<_> = cands
                            .iter()
                            .filter(|c| (c.pool > 1) == want_pool)
                            .copied()
                            .collect();
                        let chosen = preferred
                            .first()
                            .or(cands.first())
                            .copied()
                            .ok_or_else(|| {
                                Error::Attack(format!(
                                    "layer {}: no padding/stride/pool explains {} -> {width} with k={}",
                                    gi + 1,
                                    p.width,
                                    est.kernel
                                ))
                            })?;
                        if cands.len() > 1 {
                            notes.push(format!(
                                "pool: {} candidates, delay {} pooling",
                                cands.len(),
                                if want_pool {
                                    "indicates"
                                } else {
                                    "does not indicate"
                                }
                            ));
                        }
                        if chosen.pool > 1 {
                            layers.push(ExtractedLayer {
                                spec: LayerSpec::Pool { size: chosen.pool },
                                notes: vec![format!(
                                    "pool: input {} from p={} s={}",
                                    chosen.w_in, chosen.padding, chosen.stride
                                )],
                                tiles: Vec::new(),
                            });
                        }
                        (est.kernel, chosen.padding, chosen.stride)
                    }
                    Some(_) => {
                        return Err(Error::Attack(format!(
                            "layer {}: convolution after a dense layer",
                            gi + 1
                        )))
                    }
                };
                layers.push(ExtractedLayer {
                    spec: LayerSpec::Conv {
                        out_channels: size.out,
                        kernel,
                        stride,
                        padding,
                    },
                    notes,
                    tiles: g.tile_ids(),
                });
                prev = Some(Prev {
                    kind: LayerKind::Conv,
                    out: size.out,
                    width,
                    end: g.end,
                });
            }
            LayerKind::Fc => {
                if let Some(p) = prev.as_ref().filter(|p| p.kind == LayerKind::Conv) {
                    let fc_in = estimate_total_rows(g, grid.0, grid.1, hw).or_else(|e| {
                        row_ref
                            .filter(|_| grid.0 == 1)
                            .map(|r| single_row_total(g, r))
                            .ok_or(e)
                    });
                    let pool = match fc_in {
                        Ok(fc_in) => {
                            let (pool, n) = pool_conv_to_fc(p.width, p.out, fc_in);
                            notes.push(format!("in: {fc_in:.1} rows ~ {n}^2 x {}", p.out));
                            pool
                        }
                        Err(_) if gap.unwrap_or(0.0) <= pooled_gap => 1,
                        Err(_) => {
                            // pooled, single tile row: the smallest pool that fits one tile
                            let (pool, n) = (1..=p.width)
                                .rev()
                                .filter(|n| {
                                    p.width % n == 0
                                        && n * n * p.out <= hw.array_rows
                                        && *n < p.width
                                })
                                .map(|n| (p.width / n, n))
                                .next()
                                .ok_or_else(|| {
                                    Error::Attack(format!(
                                        "layer {}: pooling not identifiable",
                                        gi + 1
                                    ))
                                })?;
                            notes.push(format!("in: single tile row, assumed {n}^2 x {}", p.out));
                            pool
                        }
                    };
                    if pool > 1 {
                        layers.push(ExtractedLayer {
                            spec: LayerSpec::Pool { size: pool },
                            notes: vec!["pool: conv output width over fc input width".into()],
                            tiles: Vec::new(),
                        });
                    }
                }
                layers.push(ExtractedLayer {
                    spec: LayerSpec::Fc {
                        out_features: size.out,
                    },
                    notes,
                    tiles: g.tile_ids(),
                });
                prev = Some(Prev {
                    kind: LayerKind::Fc,
                    out: size.out,
                    width: 1,
                    end: g.end,
                });
            }
        }
    }
    Ok(ExtractedArchitecture {
        input: hw.input,
        layers,
        notes: Vec::new(),
    })
}

/// Full pipeline from traces. Tiles whose features cannot be extracted are
/// left out and listed in the report notes.
pub fn run_attack(
    traces: &[PowerTrace],
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<ExtractedArchitecture> {
    if traces.is_empty() {
        return Err(Error::Attack("no traces".into()));
    }
    let results: Vec<Result<TileFeatures>> = traces
        .par_iter()
        .map(|t| extract_features(t, hw, det))
        .collect();
    let mut features = Vec::new();
    let mut notes = Vec::new();
    for r in results {
        match r {
            Ok(f) => features.push(f),
            Err(e) => notes.push(format!("skipped: {e}")),
        }
    }
    if features.is_empty() {
        return Err(Error::Attack(format!(
            "no tile yielded features ({})",
            notes.join("; ")
        )));
    }
    let groups = layer_property_extraction(&features, hw)?;
    let mut arch = reconstruct_architecture(&groups, hw)?;
    arch.notes = notes;
    Ok(arch)
}
