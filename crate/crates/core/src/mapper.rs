//! Weight-to-conductance mapping onto fixed-size RRAM tiles.
//!
//! Every 8-bit weight occupies four adjacent columns of one tile:
//! `[pos_msb, neg_msb, pos_lsb, neg_lsb]`. A layer's logical matrix has one row
//! per flattened kernel element (`K*K*C_in`, or `in_features`) and `4*C_out`
//! columns, and is cut into a row-major grid of `array_rows x array_cols` tiles.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::netspec::{Activation, LayerSpec, NetworkSpec, QuantizedWeights};

/// Columns per mapped weight: positive/negative x MSB/LSB cell.
pub const COLS_PER_WEIGHT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TileConfig {
    pub array_rows: usize,
    pub array_cols: usize,
    pub adc_count: usize,
    pub adc_bits: u32,
    pub cell_bits: u32,
    pub cells_per_weight: usize,
    pub g_min: f64,
    pub g_max: f64,
    pub conductance_levels: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            array_rows: 128,
            array_cols: 128,
            adc_count: 4,
            adc_bits: 8,
            cell_bits: 4,
            cells_per_weight: 2,
            g_min: 1e-6,
            g_max: 100e-6,
            conductance_levels: 16,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.array_rows == 0 || self.array_cols == 0 || self.adc_count == 0 {
            return fail("array dimensions and adc_count must be positive".into());
        }
        if self.cell_bits as usize * self.cells_per_weight != 8 {
            return fail(format!(
                "cell_bits ({}) x cells_per_weight ({}) must equal the 8-bit weight width",
                self.cell_bits, self.cells_per_weight
            ));
        }
        if self.cells_per_weight != 2 {
            return fail("only the two-cell (MSB/LSB nibble) split is implemented".into());
        }
        if self.conductance_levels != 1 << self.cell_bits {
            return fail(format!(
                "conductance_levels ({}) must be 2^cell_bits ({})",
                self.conductance_levels,
                1u32 << self.cell_bits
            ));
        }
        if !self.array_cols.is_multiple_of(2 * self.adc_count) {
            return fail(format!(
                "array_cols ({}) must be divisible by 2 x adc_count ({})",
                self.array_cols,
                2 * self.adc_count
            ));
        }
        if !self.array_cols.is_multiple_of(COLS_PER_WEIGHT) {
            return fail("array_cols must be a multiple of 4".into());
        }
        if !(self.g_min > 0.0 && self.g_max > self.g_min) {
            return fail("require 0 < g_min < g_max".into());
        }
        if self.adc_bits != 8 {
            return fail("only 8-bit SAR ADCs are modelled".into());
        }
        Ok(())
    }

    /// Conductance step between adjacent programming levels.
    pub fn level_step(&self) -> f64 {
        (self.g_max - self.g_min) / (self.conductance_levels - 1) as f64
    }

    pub fn level_conductance(&self, level: u8) -> f64 {
        self.g_min + level as f64 * self.level_step()
    }

    /// Conversions each ADC performs per input bit on a fully mapped tile.
    pub fn max_conversions(&self) -> usize {
        self.array_cols / (2 * self.adc_count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConductances {
    pub pos_msb: f64,
    pub pos_lsb: f64,
    pub neg_msb: f64,
    pub neg_lsb: f64,
}

/// Splits `|q|` into nibbles and places them on the positive or negative
/// column pair; the idle pair stays at `g_min`.
pub fn weight_to_conductances(q: i8, cfg: &TileConfig) -> CellConductances {
    let mag = (q as i16).unsigned_abs().min(127) as u8;
    let (hi, lo) = (mag >> 4, mag & 0x0f);
    let off = cfg.g_min;
    if q >= 0 {
        CellConductances {
            pos_msb: cfg.level_conductance(hi),
            pos_lsb: cfg.level_conductance(lo),
            neg_msb: off,
            neg_lsb: off,
        }
    } else {
        CellConductances {
            pos_msb: off,
            pos_lsb: off,
            neg_msb: cfg.level_conductance(hi),
            neg_lsb: cfg.level_conductance(lo),
        }
    }
}

/// Inverse of the level formula, rounded to the nearest level.
pub fn conductance_to_level(g: f64, cfg: &TileConfig) -> u8 {
    ((g - cfg.g_min) / cfg.level_step())
        .round()
        .clamp(0.0, (cfg.conductance_levels - 1) as f64) as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileMapping {
    pub tile_id: usize,
    /// Index into `NetworkSpec::layers`.
    pub layer_id: usize,
    /// `(tile_row, tile_col)` within the layer's grid.
    pub grid_pos: (usize, usize),
    pub grid_shape: (usize, usize),
    /// First logical row / column of the layer matrix held by this tile.
    pub row_offset: usize,
    pub col_offset: usize,
    pub used_rows: usize,
    pub used_cols: usize,
    pub array_rows: usize,
    pub array_cols: usize,
    /// Bitlines beyond `used_cols` are biased during reads (dummy-conductance countermeasure).
    pub dummy_cols: bool,
    /// Row-major `array_rows x array_cols`, siemens.
    pub conductance: Vec<f64>,
}

impl TileMapping {
    #[inline]
    pub fn g(&self, row: usize, col: usize) -> f64 {
        self.conductance[row * self.array_cols + col]
    }

    /// Differential output pairs read out by the ADCs.
    pub fn output_pairs(&self) -> usize {
        self.used_cols / 2
    }

    /// Bitlines contributing read current.
    pub fn active_cols(&self) -> usize {
        if self.dummy_cols {
            self.array_cols
        } else {
            self.used_cols
        }
    }

    /// Weights mapped on this tile, recovered from conductances: `[local_out][local_row]`.
    pub fn recover_weights(&self, cfg: &TileConfig) -> Vec<Vec<i8>> {
        (0..self.used_cols / COLS_PER_WEIGHT)
            .map(|o| {
                (0..self.used_rows)
                    .map(|r| {
                        let c = o * COLS_PER_WEIGHT;
                        let lvl = |k| conductance_to_level(self.g(r, c + k), cfg) as i16;
                        let pos = 16 * lvl(0) + lvl(2);
                        let neg = 16 * lvl(1) + lvl(3);
                        (pos - neg) as i8
                    })
                    .collect()
            })
            .collect()
    }
}

/// Logical `(rows, cols)` of a layer's weight matrix.
pub fn layer_matrix_dims(net: &NetworkSpec, layer_id: usize) -> Result<(usize, usize)> {
    let ins = net.input_shapes()?;
    let s = ins[layer_id];
    let dims = match net.layers[layer_id] {
        LayerSpec::Conv {
            out_channels,
            kernel,
            ..
        } => (kernel * kernel * s.channels, COLS_PER_WEIGHT * out_channels),
        LayerSpec::Fc { out_features } => (s.volume(), COLS_PER_WEIGHT * out_features),
        LayerSpec::Pool { .. } => (0, 0),
    };
    Ok(dims)
}

pub fn tile_grid(rows: usize, cols: usize, cfg: &TileConfig) -> (usize, usize) {
    (rows.div_ceil(cfg.array_rows), cols.div_ceil(cfg.array_cols))
}

/// Maps every Conv/FC layer onto tiles; ids follow layer order, then the
/// row-major grid order.
pub fn map_network(
    net: &NetworkSpec,
    weights: &QuantizedWeights,
    cfg: &TileConfig,
) -> Result<Vec<TileMapping>> {
    cfg.validate()?;
    let mut tiles = Vec::new();
    for layer_id in net.vmm_layers() {
        let (rows, cols) = layer_matrix_dims(net, layer_id)?;
        if rows == 0 || cols == 0 {
            return Err(Error::Mapping {
                layer: layer_id,
                reason: "layer has an empty weight matrix".into(),
            });
        }
        let w = weights.layer(layer_id).ok_or_else(|| Error::Mapping {
            layer: layer_id,
            reason: "missing quantized weights".into(),
        })?;
        if w.inputs != rows || w.outputs * COLS_PER_WEIGHT != cols {
            return Err(Error::Mapping {
                layer: layer_id,
                reason: format!(
                    "weights are {}x{}, layer needs {}x{}",
                    w.outputs,
                    w.inputs,
                    cols / 4,
                    rows
                ),
            });
        }
        let grid = tile_grid(rows, cols, cfg);
        for gr in 0..grid.0 {
            for gc in 0..grid.1 {
                let row_offset = gr * cfg.array_rows;
                let col_offset = gc * cfg.array_cols;
                let used_rows = (rows - row_offset).min(cfg.array_rows);
                let used_cols = (cols - col_offset).min(cfg.array_cols);
                let mut conductance = vec![cfg.g_min; cfg.array_rows * cfg.array_cols];
                for lo in 0..used_cols / COLS_PER_WEIGHT {
                    let out = col_offset / COLS_PER_WEIGHT + lo;
                    for r in 0..used_rows {
                        let cells = weight_to_conductances(w.get(out, row_offset + r), cfg);
                        let base = r * cfg.array_cols + lo * COLS_PER_WEIGHT;
                        conductance[base] = cells.pos_msb;
                        conductance[base + 1] = cells.neg_msb;
                        conductance[base + 2] = cells.pos_lsb;
                        conductance[base + 3] = cells.neg_lsb;
                    }
                }
                tiles.push(TileMapping {
                    tile_id: tiles.len(),
                    layer_id,
                    grid_pos: (gr, gc),
                    grid_shape: grid,
                    row_offset,
                    col_offset,
                    used_rows,
                    used_cols,
                    array_rows: cfg.array_rows,
                    array_cols: cfg.array_cols,
                    dummy_cols: false,
                    conductance,
                });
            }
        }
    }
    Ok(tiles)
}

/// One flattened `(channel, ky, kx)` input vector per output pixel, in raster
/// order, zero padded.
pub fn im2col_inputs(
    act: &Activation,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Vec<Vec<u8>> {
    let s = act.shape;
    let Some(w_out) = crate::netspec::conv_output_width(s.width, kernel, stride, padding) else {
        return Vec::new();
    };
    let h_out = crate::netspec::conv_output_width(s.height, kernel, stride, padding).unwrap_or(0);
    let mut out = Vec::with_capacity(w_out * h_out);
    for oy in 0..h_out {
        for ox in 0..w_out {
            let mut v = Vec::with_capacity(kernel * kernel * s.channels);
            for c in 0..s.channels {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        let x = (ox * stride + kx) as isize - padding as isize;
                        let inside =
                            y >= 0 && x >= 0 && (y as usize) < s.height && (x as usize) < s.width;
                        v.push(if inside {
                            act.at(c, y as usize, x as usize)
                        } else {
                            0
                        });
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

/// Fills every unused column with uniform random conductances in
/// `[g_min, g_max]`; the mapped region is left untouched.
pub fn apply_dummy_conductance(
    mappings: &[TileMapping],
    cfg: &TileConfig,
    seed: u64,
) -> Vec<TileMapping> {
    mappings
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.used_cols < t.array_cols {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (t.tile_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                for r in 0..t.array_rows {
                    for c in t.used_cols..t.array_cols {
                        t.conductance[r * t.array_cols + c] =
                            rng.random_range(cfg.g_min..=cfg.g_max);
                    }
                }
                t.dummy_cols = true;
            }
            t
        })
        .collect()
}

/// Debug manifest of the mapping. Never an input to the attack.
pub fn mapping_manifest(mappings: &[TileMapping]) -> String {
    let mut s = String::from("# tile layer grid_row grid_col used_rows used_cols\n");
    for t in mappings {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            t.tile_id, t.layer_id, t.grid_pos.0, t.grid_pos.1, t.used_rows, t.used_cols
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{FloatWeights, QuantizedTensor, Shape};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1e-9)
    }

    #[test]
    fn default_config_is_valid() {
        TileConfig::default().validate().unwrap();
        let bad = TileConfig {
            conductance_levels: 8,
            ..TileConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TileConfig {
            array_cols: 100,
            ..TileConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conductance_examples() {
        let cfg = TileConfig::default();
        let z = weight_to_conductances(0, &cfg);
        assert!([z.pos_msb, z.pos_lsb, z.neg_msb, z.neg_lsb]
            .iter()
            .all(|&g| g == cfg.g_min));

        let p = weight_to_conductances(127, &cfg);
        assert!(close(p.pos_msb, 47.2e-6));
        assert!(close(p.pos_lsb, 100e-6));
        assert_eq!((p.neg_msb, p.neg_lsb), (cfg.g_min, cfg.g_min));

        let n = weight_to_conductances(-16, &cfg);
        assert!(close(n.neg_msb, 7.6e-6));
        assert!(close(n.neg_lsb, 1e-6));
        assert_eq!((n.pos_msb, n.pos_lsb), (cfg.g_min, cfg.g_min));
    }

    #[test]
    fn lenet_uses_23_tiles() {
        let net = NetworkSpec::lenet();
        let cfg = TileConfig::default();
        let w = FloatWeights::random(&net, 1)
            .unwrap()
            .quantize(&net)
            .unwrap();
        let tiles = map_network(&net, &w, &cfg).unwrap();
        assert_eq!(tiles.len(), 23);
        let per_layer: Vec<usize> = net
            .vmm_layers()
            .iter()
            .map(|l| tiles.iter().filter(|t| t.layer_id == *l).count())
            .collect();
        assert_eq!(per_layer, vec![1, 2, 16, 3, 1]);
        let fc1: Vec<_> = tiles.iter().filter(|t| t.layer_id == 4).collect();
        assert_eq!(fc1[0].grid_shape, (4, 4));
        assert_eq!(fc1[3].used_cols, 96);
        assert_eq!(fc1[15].used_rows, 16);
        let conv2: Vec<_> = tiles.iter().filter(|t| t.layer_id == 2).collect();
        assert_eq!(conv2[0].grid_shape, (2, 1));
        assert_eq!((conv2[1].used_rows, conv2[1].used_cols), (22, 64));
    }

    #[test]
    fn tiny_fc_fits_one_tile() {
        let net = NetworkSpec::new(Shape::new(4, 1, 1), vec![LayerSpec::Fc { out_features: 2 }]);
        let w = FloatWeights::random(&net, 1)
            .unwrap()
            .quantize(&net)
            .unwrap();
        let tiles = map_network(&net, &w, &TileConfig::default()).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].used_rows, tiles[0].used_cols), (4, 8));
        assert!(tiles[0].conductance[8..128].iter().all(|&g| g == 1e-6));
    }

    #[test]
    fn mismatched_weights_rejected() {
        let net = NetworkSpec::new(Shape::new(4, 1, 1), vec![LayerSpec::Fc { out_features: 2 }]);
        let w = QuantizedWeights {
            layers: vec![Some(QuantizedTensor {
                values: vec![0; 6],
                scale: 1.0,
                outputs: 2,
                inputs: 3,
            })],
        };
        assert!(map_network(&net, &w, &TileConfig::default()).is_err());
    }

    #[test]
    fn weights_survive_the_mapping() {
        let net = NetworkSpec::lenet();
        let cfg = TileConfig::default();
        let q = FloatWeights::random(&net, 4)
            .unwrap()
            .quantize(&net)
            .unwrap();
        for t in map_network(&net, &q, &cfg).unwrap() {
            let w = q.layer(t.layer_id).unwrap();
            for (lo, col) in t.recover_weights(&cfg).iter().enumerate() {
                for (r, &v) in col.iter().enumerate() {
                    assert_eq!(v, w.get(t.col_offset / 4 + lo, t.row_offset + r));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn nibble_roundtrip(q in -127i8..=127) {
            let cfg = TileConfig::default();
            let c = weight_to_conductances(q, &cfg);
            let pos = 16 * conductance_to_level(c.pos_msb, &cfg) as i16 + conductance_to_level(c.pos_lsb, &cfg) as i16;
            let neg = 16 * conductance_to_level(c.neg_msb, &cfg) as i16 + conductance_to_level(c.neg_lsb, &cfg) as i16;
            prop_assert!(pos == 0 || neg == 0);
            prop_assert_eq!(pos - neg, q as i16);
        }

        #[test]
        fn tile_count_is_sum_of_grids(c_in in 1usize..12, c_out in 1usize..60, k in prop::sample::select(vec![1usize, 3, 5]), fc in 1usize..200) {
            let net = NetworkSpec::new(Shape::new(c_in, 8, 8), vec![
                LayerSpec::conv(c_out, k),
                LayerSpec::Fc { out_features: fc },
            ]);
            let cfg = TileConfig::default();
            let w = FloatWeights::random(&net, 2).unwrap().quantize(&net).unwrap();
            let tiles = map_network(&net, &w, &cfg).unwrap();
            let expected: usize = net.vmm_layers().iter().map(|&l| {
                let (r, c) = layer_matrix_dims(&net, l).unwrap();
                r.div_ceil(128) * c.div_ceil(128)
            }).sum();
            prop_assert_eq!(tiles.len(), expected);
            for t in &tiles {
                prop_assert_eq!(t.used_cols % 4, 0);
            }
        }
    }

    #[test]
    fn im2col_counts_and_order() {
        let a = Activation::new(Shape::new(1, 3, 3), (1..=9).collect());
        assert_eq!(
            im2col_inputs(&a, 3, 1, 0),
            vec![(1..=9).collect::<Vec<u8>>()]
        );

        let a = Activation::zeros(Shape::new(1, 4, 4));
        assert_eq!(im2col_inputs(&a, 3, 1, 0).len(), 4);

        let a = Activation::zeros(Shape::new(3, 32, 32));
        let v = im2col_inputs(&a, 5, 1, 0);
        assert_eq!(v.len(), 784);
        assert!(v.iter().all(|x| x.len() == 75));

        let a = Activation::new(Shape::new(1, 2, 2), vec![1, 2, 3, 4]);
        let v = im2col_inputs(&a, 3, 1, 1);
        assert_eq!(v.len(), 4);
        assert_eq!(v[0], vec![0, 0, 0, 0, 1, 2, 0, 3, 4]);
    }

    #[test]
    fn dummy_conductance_fills_only_unused_columns() {
        let net = NetworkSpec::lenet();
        let cfg = TileConfig::default();
        let q = FloatWeights::random(&net, 4)
            .unwrap()
            .quantize(&net)
            .unwrap();
        let tiles = map_network(&net, &q, &cfg).unwrap();
        let dummy = apply_dummy_conductance(&tiles, &cfg, 7);
        let again = apply_dummy_conductance(&tiles, &cfg, 7);
        assert_eq!(dummy, again);
        for (a, b) in tiles.iter().zip(&dummy) {
            for r in 0..128 {
                for c in 0..128 {
                    if c < a.used_cols {
                        assert_eq!(a.g(r, c).to_bits(), b.g(r, c).to_bits());
                    } else {
                        assert!((cfg.g_min..=cfg.g_max).contains(&b.g(r, c)));
                    }
                }
            }
            if a.used_cols == 128 {
                assert_eq!(a, b);
            }
        }
        let t96 = &dummy[6];
        assert_eq!(t96.used_cols, 96);
        assert!((96..128).any(|c| t96.g(0, c) != cfg.g_min));
    }
}
