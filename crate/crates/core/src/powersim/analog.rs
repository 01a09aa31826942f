use super::TechnologyModel;
use crate::mapper::{TileConfig, TileMapping};

/// One bit-serial read of a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadEvent {
    /// `(i_pos, i_neg)` per differential output pair, amperes.
    pub pair_currents: Vec<(f64, f64)>,
    /// Bitline charging energy, joules; lands in the first sample of the event.
    pub transient_energy: f64,
    /// Array power during the stable read, watts.
    pub static_power: f64,
    pub duration: f64,
}

/// Applies `input_bits` (one per used row) as read pulses.
///
/// `I_j = v_read * sum_{active rows} G[row][j]`; the static power sums
/// `v_read * I_j` over the biased bitlines and the transient charges
/// `c_bitline * used_rows` to `v_read` on every bitline that conducts.
pub fn array_read_event(
    tile: &TileMapping,
    input_bits: &[bool],
    tech: &TechnologyModel,
) -> ReadEvent {
    assert_eq!(
        input_bits.len(),
        tile.used_rows,
        "one input bit per used row"
    );
    let cols = tile.active_cols();
    let mut g_sum = vec![0.0f64; cols];
    for (r, _) in input_bits.iter().enumerate().filter(|(_, b)| **b) {
        let row = &tile.conductance[r * tile.array_cols..r * tile.array_cols + cols];
        for (acc, g) in g_sum.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let currents: Vec<f64> = g_sum.iter().map(|g| tech.v_read * g).collect();
    let static_power = tech.v_read * currents.iter().sum::<f64>();
    let switching = currents.iter().filter(|&&i| i > 0.0).count();
    let transient_energy =
        0.5 * tech.c_bitline * tile.used_rows as f64 * tech.v_read * tech.v_read * switching as f64;
    let pair_currents = (0..tile.output_pairs())
        .map(|p| (currents[2 * p], currents[2 * p + 1]))
        .collect();
    ReadEvent {
        pair_currents,
        transient_energy,
        static_power,
        duration: tech.settle_time,
    }
}

/// Voltage held on the sampling capacitor after the current-mirror
/// subtractor integrates `i_pos - i_neg` from `V_dd/2` for the settle window.
pub fn subtract_and_sample(i_pos: f64, i_neg: f64, tech: &TechnologyModel) -> f64 {
    (tech.v_dd / 2.0 + (i_pos - i_neg) * tech.settle_time / tech.c_sample).clamp(0.0, tech.v_dd)
}

/// Signed partial sum in conductance-level units carried by a differential pair.
pub fn partial_sum_units(i_pos: f64, i_neg: f64, cfg: &TileConfig, tech: &TechnologyModel) -> i64 {
    ((i_pos - i_neg) / (tech.v_read * cfg.level_step())).round() as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{LayerSpec, NetworkSpec, QuantizedTensor, QuantizedWeights, Shape};

    fn single_weight_tile(q: i8, rows: usize) -> TileMapping {
        let net = NetworkSpec::new(
            Shape::new(rows, 1, 1),
            vec![LayerSpec::Fc { out_features: 1 }],
        );
        let w = QuantizedWeights {
            layers: vec![Some(QuantizedTensor {
                values: vec![q; rows],
                scale: 1.0,
                outputs: 1,
                inputs: rows,
            })],
        };
        crate::mapper::map_network(&net, &w, &TileConfig::default())
            .unwrap()
            .remove(0)
    }

    #[test]
    fn idle_inputs_draw_nothing() {
        let tile = single_weight_tile(50, 3);
        let ev = array_read_event(&tile, &[false; 3], &TechnologyModel::default());
        assert_eq!(ev.static_power, 0.0);
        assert_eq!(ev.transient_energy, 0.0);
        assert!(ev.pair_currents.iter().all(|&(a, b)| a == 0.0 && b == 0.0));
    }

    #[test]
    fn single_row_max_weight_current() {
        let tile = single_weight_tile(127, 1);
        let ev = array_read_event(&tile, &[true], &TechnologyModel::default());
        assert!((ev.pair_currents[0].0 - 9.44e-6).abs() < 1e-15);
        assert!((ev.pair_currents[0].1 - 0.2e-6).abs() < 1e-15);
    }

    #[test]
    fn static_power_grows_with_active_rows() {
        let tile = single_weight_tile(-77, 20);
        let tech = TechnologyModel::default();
        let mut last = 0.0;
        for k in 0..=20 {
            let bits: Vec<bool> = (0..20).map(|r| r < k).collect();
            let p = array_read_event(&tile, &bits, &tech).static_power;
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn sample_hold_examples() {
        let tech = TechnologyModel::default();
        assert_eq!(subtract_and_sample(3e-6, 3e-6, &tech), 0.45);
        assert!((subtract_and_sample(9.44e-6, 0.0, &tech) - 0.5975).abs() < 1e-12);
        assert_eq!(subtract_and_sample(0.0, 1e-3, &tech), 0.0);
        assert_eq!(subtract_and_sample(1e-3, 0.0, &tech), tech.v_dd);
    }

    #[test]
    fn partial_sums_are_exact_integers() {
        let cfg = TileConfig::default();
        let tech = TechnologyModel::default();
        let tile = single_weight_tile(-93, 7);
        let bits = [true, false, true, true, false, true, true];
        let ev = array_read_event(&tile, &bits, &tech);
        let msb = partial_sum_units(ev.pair_currents[0].0, ev.pair_currents[0].1, &cfg, &tech);
        let lsb = partial_sum_units(ev.pair_currents[1].0, ev.pair_currents[1].1, &cfg, &tech);
        assert_eq!(16 * msb + lsb, -93 * 5);
    }
}
