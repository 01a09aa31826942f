//! Evaluator side of the measurement-artifact study: degrade clean traces,
//! run the attack, and score the output-size and kernel-size readouts
//! against the known mapping.

use std::fmt;

use rayon::prelude::*;

use crate::artifacts::ArtifactSpec;
use crate::attack::{
    exact_sqrt, extract_features, group_by_start, kernel_size_extraction, output_size_extraction,
    DetectorConfig, HwKnowledge, LayerGroup, LayerKind, TileFeatures,
};
use crate::error::Result;
use crate::mapper::TileMapping;
use crate::netspec::{LayerSpec, NetworkSpec};
use crate::trace::PowerTrace;

/// Ground truth for one Conv/FC layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthLayer {
    pub kind: LayerKind,
    pub tiles: Vec<usize>,
    pub out: usize,
    pub kernel: Option<usize>,
}

pub fn truth_layers(net: &NetworkSpec, mappings: &[TileMapping]) -> Vec<TruthLayer> {
    net.vmm_layers()
        .into_iter()
        .map(|l| {
            let mut tiles: Vec<usize> = mappings
                .iter()
                .filter(|t| t.layer_id == l)
                .map(|t| t.tile_id)
                .collect();
            tiles.sort_unstable();
            match net.layers[l] {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => TruthLayer {
                    kind: LayerKind::Conv,
                    tiles,
                    out: out_channels,
                    kernel: Some(kernel),
                },
                LayerSpec::Fc { out_features } => TruthLayer {
                    kind: LayerKind::Fc,
                    tiles,
                    out: out_features,
                    kernel: None,
                },
                LayerSpec::Pool { .. } => unreachable!("vmm layers only"),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SizeOutcome {
    Fail,
    FailAtFc,
    Success,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum KernelOutcome {
    Fail,
    Success,
    NotApplicable,
}

impl fmt::Display for SizeOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeOutcome::Success => "Success",
            SizeOutcome::FailAtFc => "Fail at FC",
            SizeOutcome::Fail => "Fail",
        })
    }
}

impl fmt::Display for KernelOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelOutcome::Success => "Success",
            KernelOutcome::Fail => "Fail",
            KernelOutcome::NotApplicable => "-",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub rate: f64,
    pub noise_std: f64,
    pub sizes: SizeOutcome,
    pub kernel: KernelOutcome,
    /// Truth layers (index into the Conv/FC list) that were not recovered.
    pub failed_layers: Vec<usize>,
}

/// Scores extracted per-tile features against the truth.
pub fn score_features(
    features: &[TileFeatures],
    truth: &[TruthLayer],
    hw: &HwKnowledge,
) -> (SizeOutcome, KernelOutcome, Vec<usize>) {
    let groups: Vec<LayerGroup> = group_by_start(features, hw)
        .into_iter()
        .map(|tiles| {
            let kind = if tiles.iter().all(|t| t.vmm_count == 1) {
                LayerKind::Fc
            } else {
                LayerKind::Conv
            };
            let start = tiles
                .iter()
                .map(|t| t.start_time)
                .fold(f64::INFINITY, f64::min);
            let end = tiles
                .iter()
                .map(|t| t.end_time)
                .fold(f64::NEG_INFINITY, f64::max);
            LayerGroup {
                kind,
                tiles,
                start,
                end,
            }
        })
        .collect();
    let find = |layer: &TruthLayer| groups.iter().find(|g| g.tile_ids() == layer.tiles);

    let mut failed = Vec::new();
    let mut out_ok = vec![false; truth.len()];
    for (i, layer) in truth.iter().enumerate() {
        let ok = find(layer).is_some_and(|g| {
            let types = match layer.kind {
                LayerKind::Fc => g.tiles.iter().all(|t| t.vmm_count == 1),
                LayerKind::Conv => g.tiles.iter().all(|t| t.vmm_count > 1),
            };
            types && output_size_extraction(g, hw).is_ok_and(|s| s.out == layer.out)
        });
        out_ok[i] = ok;
        if !ok {
            failed.push(i);
        }
    }
    let conv_ok = truth
        .iter()
        .zip(&out_ok)
        .all(|(l, ok)| l.kind != LayerKind::Conv || *ok);
    let sizes = if failed.is_empty() {
        SizeOutcome::Success
    } else if conv_ok {
        SizeOutcome::FailAtFc
    } else {
        SizeOutcome::Fail
    };

    // kernel extraction on every later conv layer spanning several tile rows
    let mut kernel = KernelOutcome::NotApplicable;
    for i in 1..truth.len() {
        let layer = &truth[i];
        if layer.kind != LayerKind::Conv || truth[i - 1].kind != LayerKind::Conv {
            continue;
        }
        let Some(g) = find(layer) else {
            kernel = KernelOutcome::Fail;
            continue;
        };
        let Ok(size) = output_size_extraction(g, hw) else {
            kernel = KernelOutcome::Fail;
            continue;
        };
        if size.grid_rows < 2 {
            continue;
        }
        let prereq = out_ok[i - 1] && out_ok[i] && exact_sqrt(g.vmm_count()).is_some();
        let k = kernel_size_extraction(
            g,
            (size.grid_rows, size.grid_cols),
            truth[i - 1].out,
            hw,
            &[1, 3, 5, 7],
        );
        let ok = prereq && k.is_ok_and(|k| Some(k.kernel) == layer.kernel);
        kernel = match (kernel, ok) {
            (KernelOutcome::Fail, _) | (_, false) => KernelOutcome::Fail,
            _ => KernelOutcome::Success,
        };
    }
    (sizes, kernel, failed)
}

/// Applies the artifacts for one `(rate, noise)` cell and scores the attack.
pub fn evaluate_cell(
    clean: &[PowerTrace],
    rate: f64,
    noise_std: f64,
    seed: u64,
    truth: &[TruthLayer],
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<CellResult> {
    let spec = ArtifactSpec {
        noise_std,
        target_rate: Some(rate),
        seed,
        noise_after_resample: true,
    };
    let features: Vec<TileFeatures> = clean
        .par_iter()
        .map(|t| spec.apply(t).map(|d| extract_features(&d, hw, det).ok()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let (sizes, kernel, failed_layers) = score_features(&features, truth, hw);
    Ok(CellResult {
        rate,
        noise_std,
        sizes,
        kernel,
        failed_layers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessMatrix {
    /// Descending.
    pub rates: Vec<f64>,
    /// Ascending.
    pub noises: Vec<f64>,
    /// Row-major over `rates x noises`.
    pub cells: Vec<CellResult>,
}

pub fn robustness_matrix(
    clean: &[PowerTrace],
    rates: &[f64],
    noises: &[f64],
    seed: u64,
    truth: &[TruthLayer],
    hw: &HwKnowledge,
    det: &DetectorConfig,
) -> Result<RobustnessMatrix> {
    let mut rates = rates.to_vec();
    rates.sort_by(|a, b| b.total_cmp(a));
    let mut noises = noises.to_vec();
    noises.sort_by(f64::total_cmp);
    let mut cells = Vec::with_capacity(rates.len() * noises.len());
    for &r in &rates {
        for &n in &noises {
            cells.push(evaluate_cell(clean, r, n, seed, truth, hw, det)?);
        }
    }
    Ok(RobustnessMatrix {
        rates,
        noises,
        cells,
    })
}

fn rate_label(r: f64) -> String {
    if r >= 1e9 {
        format!("{} GSa/s", r / 1e9)
    } else {
        format!("{} MSa/s", r / 1e6)
    }
}

impl RobustnessMatrix {
    pub fn cell(&self, ri: usize, ni: usize) -> &CellResult {
        &self.cells[ri * self.noises.len() + ni]
    }

    /// Success never improves with a lower rate or more noise.
    pub fn is_monotone(&self) -> bool {
        let (nr, nn) = (self.rates.len(), self.noises.len());
        for ri in 0..nr {
            for ni in 0..nn {
                let c = self.cell(ri, ni);
                let worse_neighbours = [
                    (ri + 1 < nr).then(|| self.cell(ri + 1, ni)),
                    (ni + 1 < nn).then(|| self.cell(ri, ni + 1)),
                ];
                for w in worse_neighbours.into_iter().flatten() {
                    if w.sizes > c.sizes || kernel_rank(w.kernel) > kernel_rank(c.kernel) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Along every rate row, the first failure as noise grows is at FC layers.
    pub fn fails_at_fc_first(&self) -> bool {
        (0..self.rates.len()).all(|ri| {
            (0..self.noises.len())
                .map(|ni| self.cell(ri, ni).sizes)
                .find(|o| *o != SizeOutcome::Success)
                .is_none_or(|o| o == SizeOutcome::FailAtFc)
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rate_sps,noise_w,output_size,kernel_size,failed_layers\n");
        for c in &self.cells {
            let failed: Vec<String> = c.failed_layers.iter().map(|l| l.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.rate,
                c.noise_std,
                c.sizes,
                c.kernel,
                failed.join(" ")
            ));
        }
        s
    }
}

fn kernel_rank(o: KernelOutcome) -> u8 {
    match o {
        KernelOutcome::Fail => 0,
        KernelOutcome::Success | KernelOutcome::NotApplicable => 1,
    }
}

impl fmt::Display for RobustnessMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (title, alg) in [("Output sizes", 2), ("Kernel size", 3)] {
            writeln!(f, "{title}")?;
            write!(f, "{:<12}", "rate \\ noise")?;
            for n in &self.noises {
                write!(f, " | {:<10}", format!("{} mW", n * 1e3))?;
            }
            writeln!(f)?;
            for (ri, r) in self.rates.iter().enumerate() {
                write!(f, "{:<12}", rate_label(*r))?;
                for ni in 0..self.noises.len() {
                    let c = self.cell(ri, ni);
                    let text = if alg == 2 {
                        c.sizes.to_string()
                    } else {
                        c.kernel.to_string()
                    };
                    write!(f, " | {text:<10}")?;
                }
                writeln!(f)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(id: usize, start: f64, vmm: usize, c: usize, p: f64) -> TileFeatures {
        TileFeatures {
            tile_id: id,
            start_time: start,
            end_time: start + 1e-6,
            vmm_count: vmm,
            adc_exec_count: c,
            mean_analog_power: p,
            significance: 50.0,
        }
    }

    fn truth() -> Vec<TruthLayer> {
        vec![
            TruthLayer {
                kind: LayerKind::Conv,
                tiles: vec![0],
                out: 6,
                kernel: Some(5),
            },
            TruthLayer {
                kind: LayerKind::Conv,
                tiles: vec![1, 2],
                out: 16,
                kernel: Some(5),
            },
            TruthLayer {
                kind: LayerKind::Fc,
                tiles: vec![3],
                out: 10,
                kernel: None,
            },
        ]
    }

    #[test]
    fn scoring() {
        let hw = HwKnowledge::default();
        let good = vec![
            feat(0, 1e-6, 784, 3, 4e-3),
            feat(1, 5e-6, 100, 8, 7e-3),
            feat(2, 5e-6, 100, 8, 7e-3 * 22.0 / 128.0),
            feat(3, 9e-6, 1, 5, 4e-3),
        ];
        assert_eq!(
            score_features(&good, &truth(), &hw),
            (SizeOutcome::Success, KernelOutcome::Success, vec![])
        );
        let fc_lost = &good[..3];
        assert_eq!(
            score_features(fc_lost, &truth(), &hw).0,
            SizeOutcome::FailAtFc
        );
        let mut split = good.clone();
        split[2].start_time += 300e-9;
        let (a2, a3, failed) = score_features(&split, &truth(), &hw);
        assert_eq!((a2, a3), (SizeOutcome::Fail, KernelOutcome::Fail));
        assert_eq!(failed, vec![1]);
    }

    #[test]
    fn monotonicity_check() {
        let cell = |a2, a3| CellResult {
            rate: 0.0,
            noise_std: 0.0,
            sizes: a2,
            kernel: a3,
            failed_layers: vec![],
        };
        use SizeOutcome::*;
        let ok = RobustnessMatrix {
            rates: vec![2.0, 1.0],
            noises: vec![0.0, 1.0],
            cells: vec![
                cell(Success, KernelOutcome::Success),
                cell(FailAtFc, KernelOutcome::Success),
                cell(FailAtFc, KernelOutcome::Success),
                cell(Fail, KernelOutcome::Fail),
            ],
        };
        assert!(ok.is_monotone());
        assert!(ok.fails_at_fc_first());
        let mut better_when_worse = ok.clone();
        better_when_worse.cells[3].sizes = Success;
        assert!(!better_when_worse.is_monotone());
        let mut conv_first = ok.clone();
        conv_first.cells[1].sizes = Fail;
        assert!(conv_first.is_monotone());
        assert!(!conv_first.fails_at_fc_first());
    }
}
