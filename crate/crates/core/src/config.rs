//! Run configuration: flat `key = value` text with dotted sections.
//!
//! ```text
//! # comments run to end of line
//! tile.array_rows = 128
//! tech.row_driver_power = 300e-6
//! tech.lut.router = 2e-15, 1.5e-15
//! sim.scramble_max_delay = 200e-9
//! artifacts.target_rate = 1e9
//! run.network = lenet
//! matrix.rates = 1e10, 1e9, 5e8, 2e8
//! ```
//!
//! Every key has a default; a file only lists what it changes. `--set`
//! overrides go through the same [`RunConfig::set`] entry point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::artifacts::ArtifactSpec;
use crate::attack::{DetectorConfig, HwKnowledge};
use crate::error::{Error, Result};
use crate::mapper::TileConfig;
use crate::netspec::{
    load_cifar_batch, synthetic_images, Activation, FloatWeights, NetworkSpec, QuantizedWeights,
    Shape,
};
use crate::powersim::{DigitalKind, SimulationOptions, TechnologyModel};

/// Where inference inputs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Synthetic {
        count: usize,
        seed: u64,
    },
    /// CIFAR-10 binary batch: 1 label byte + 3072 pixel bytes per record.
    Cifar {
        path: PathBuf,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tile: TileConfig,
    pub tech: TechnologyModel,
    pub sim: SimulationOptions,
    pub artifacts: ArtifactSpec,
    pub detector: DetectorConfig,
    /// `lenet` or a network file path.
    pub network: String,
    /// Weight file; random weights from `weight_seed` when absent.
    pub weights: Option<PathBuf>,
    pub weight_seed: u64,
    pub images: ImageSource,
    /// Explicit attacker knowledge; unset fields follow the tile and
    /// technology sections.
    pub hw: Vec<(String, String)>,
    pub matrix_rates: Vec<f64>,
    pub matrix_noises: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tile: TileConfig::default(),
            tech: TechnologyModel::default(),
            sim: SimulationOptions::default(),
            artifacts: ArtifactSpec::default(),
            detector: DetectorConfig::default(),
            network: "lenet".into(),
            weights: None,
            weight_seed: 0,
            images: ImageSource::Synthetic { count: 1, seed: 0 },
            hw: Vec::new(),
            matrix_rates: vec![1e10, 1e9, 5e8, 2e8],
            matrix_noises: vec![0.0, 1e-3, 2e-3, 3e-3],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got `{value}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `none` or a number.
fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line; later lines win.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given to `--set`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` has no section")))?;
        let t = &mut self.tile;
        let e = &mut self.tech;
        let s = &mut self.sim;
        let a = &mut self.artifacts;
        let d = &mut self.detector;
        match (section, field) {
            ("tile", "array_rows") => t.array_rows = parse(key, v)?,
            ("tile", "array_cols") => t.array_cols = parse(key, v)?,
            ("tile", "adc_count") => t.adc_count = parse(key, v)?,
            ("tile", "adc_bits") => t.adc_bits = parse(key, v)?,
            ("tile", "cell_bits") => t.cell_bits = parse(key, v)?,
            ("tile", "cells_per_weight") => t.cells_per_weight = parse(key, v)?,
            ("tile", "g_min") => t.g_min = parse(key, v)?,
            ("tile", "g_max") => t.g_max = parse(key, v)?,
            ("tile", "conductance_levels") => t.conductance_levels = parse(key, v)?,

            ("tech", "v_read") => e.v_read = parse(key, v)?,
            ("tech", "v_dd") => e.v_dd = parse(key, v)?,
            ("tech", "v_ref") => e.v_ref = parse(key, v)?,
            ("tech", "c_unit") => e.c_unit = parse(key, v)?,
            ("tech", "c_sample") => e.c_sample = parse(key, v)?,
            ("tech", "c_bitline") => e.c_bitline = parse(key, v)?,
            ("tech", "serial_clock_hz") => e.serial_clock_hz = parse(key, v)?,
            ("tech", "digital_clock_hz") => e.digital_clock_hz = parse(key, v)?,
            ("tech", "adc_step_time") => e.adc_step_time = parse(key, v)?,
            ("tech", "settle_time") => e.settle_time = parse(key, v)?,
            ("tech", "row_driver_power") => e.row_driver_power = parse(key, v)?,
            ("tech", "handoff_clocks") => e.handoff_clocks = parse(key, v)?,
            ("tech", f) if f.starts_with("lut.") => {
                let kind: DigitalKind = f["lut.".len()..].parse()?;
                let energies = parse_list(key, v)?;
                let [rise, fall] = energies[..] else {
                    return Err(Error::Config(format!(
                        "{key}: expected `rise, fall` energies"
                    )));
                };
                e.digital_energy_lut.set(kind, rise, fall);
            }

            ("sim", "halt_pipeline") => s.halt_pipeline = parse_bool(key, v)?,
            ("sim", "scramble_max_delay") => s.scramble_max_delay = parse_opt(key, v)?,
            ("sim", "pad_adc") => s.pad_adc = parse_bool(key, v)?,
            ("sim", "rng_seed") => s.rng_seed = parse(key, v)?,
            ("sim", "sample_rate") => s.sample_rate = parse(key, v)?,
            ("sim", "idle_margin") => s.idle_margin = parse(key, v)?,

            ("artifacts", "noise_std") => a.noise_std = parse(key, v)?,
            ("artifacts", "target_rate") => a.target_rate = parse_opt(key, v)?,
            ("artifacts", "seed") => a.seed = parse(key, v)?,
            ("artifacts", "noise_after_resample") => a.noise_after_resample = parse_bool(key, v)?,

            ("detector", "sigma_k") => d.sigma_k = parse(key, v)?,
            ("detector", "kappa") => d.kappa = parse(key, v)?,
            ("detector", "idle_window") => d.idle_window = parse(key, v)?,
            ("detector", "min_significance") => d.min_significance = parse(key, v)?,

            ("hw", f) => {
                // checked now so typos fail at load time
                HwKnowledge::default().set(f, v)?;
                self.hw.retain(|(k, _)| k != f);
                self.hw.push((f.to_string(), v.to_string()));
            }

            ("run", "network") => self.network = v.to_string(),
            ("run", "weights") => self.weights = (v != "random").then(|| PathBuf::from(v)),
            ("run", "weight_seed") => self.weight_seed = parse(key, v)?,
            ("run", "images") => {
                let count = parse(key, v)?;
                match &mut self.images {
                    ImageSource::Synthetic { count: c, .. }
                    | ImageSource::Cifar { count: c, .. } => *c = count,
                }
            }
            ("run", "image_seed") => {
                let seed = parse(key, v)?;
                let count = self.image_count();
                self.images = ImageSource::Synthetic { count, seed };
            }
            ("run", "cifar") => {
                let count = self.image_count();
                self.images = ImageSource::Cifar {
                    path: PathBuf::from(v),
                    count,
                };
            }

            ("matrix", "rates") => self.matrix_rates = parse_list(key, v)?,
            ("matrix", "noises") => self.matrix_noises = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn image_count(&self) -> usize {
        match &self.images {
            ImageSource::Synthetic { count, .. } | ImageSource::Cifar { count, .. } => *count,
        }
    }

    /// Seeds every random stream from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.weight_seed = seed;
        self.sim.rng_seed = seed;
        self.artifacts.seed = seed;
        let count = self.image_count();
        if let ImageSource::Synthetic { .. } = self.images {
            self.images = ImageSource::Synthetic { count, seed };
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.network == "lenet" {
            Ok(NetworkSpec::lenet())
        } else {
            NetworkSpec::load(&self.network)
        }
    }

    pub fn quantized_weights(&self, net: &NetworkSpec) -> Result<QuantizedWeights> {
        let w = match &self.weights {
            Some(p) => FloatWeights::load(net, p)?,
            None => FloatWeights::random(net, self.weight_seed)?,
        };
        w.quantize(net)
    }

    pub fn load_images(&self, shape: Shape) -> Result<Vec<Activation>> {
        match &self.images {
            ImageSource::Synthetic { count, seed } => Ok(synthetic_images(shape, *count, *seed)),
            ImageSource::Cifar { path, count } => load_cifar_batch(path, *count),
        }
    }

    /// Attacker knowledge: the public tile datasheet, the dataset geometry,
    /// then any explicit `hw.*` keys.
    pub fn hw_knowledge(&self, input: Shape) -> Result<HwKnowledge> {
        let mut hw = hw_from_datasheet(&self.tile, &self.tech, input);
        for (k, v) in &self.hw {
            hw.set(k, v)?;
        }
        Ok(hw)
    }

    /// Every key with its current value, in file syntax.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.tile;
        let e = &self.tech;
        let opt = |o: Option<f64>| o.map_or("none".to_string(), |v| v.to_string());
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let lines: Vec<(String, String)> = vec![
            ("tile.array_rows".into(), t.array_rows.to_string()),
            ("tile.array_cols".into(), t.array_cols.to_string()),
            ("tile.adc_count".into(), t.adc_count.to_string()),
            ("tile.adc_bits".into(), t.adc_bits.to_string()),
            ("tile.cell_bits".into(), t.cell_bits.to_string()),
            (
                "tile.cells_per_weight".into(),
                t.cells_per_weight.to_string(),
            ),
            ("tile.g_min".into(), t.g_min.to_string()),
            ("tile.g_max".into(), t.g_max.to_string()),
            (
                "tile.conductance_levels".into(),
                t.conductance_levels.to_string(),
            ),
            ("tech.v_read".into(), e.v_read.to_string()),
            ("tech.v_dd".into(), e.v_dd.to_string()),
            ("tech.v_ref".into(), e.v_ref.to_string()),
            ("tech.c_unit".into(), e.c_unit.to_string()),
            ("tech.c_sample".into(), e.c_sample.to_string()),
            ("tech.c_bitline".into(), e.c_bitline.to_string()),
            ("tech.serial_clock_hz".into(), e.serial_clock_hz.to_string()),
            (
                "tech.digital_clock_hz".into(),
                e.digital_clock_hz.to_string(),
            ),
            ("tech.adc_step_time".into(), e.adc_step_time.to_string()),
            ("tech.settle_time".into(), e.settle_time.to_string()),
            (
                "tech.row_driver_power".into(),
                e.row_driver_power.to_string(),
            ),
            ("tech.handoff_clocks".into(), e.handoff_clocks.to_string()),
        ]
        .into_iter()
        .chain(DigitalKind::ALL.into_iter().map(|k| {
            let (r, f) = e.digital_energy_lut.get(k);
            (format!("tech.lut.{k}"), format!("{r}, {f}"))
        }))
        .chain([
            (
                "sim.halt_pipeline".into(),
                self.sim.halt_pipeline.to_string(),
            ),
            (
                "sim.scramble_max_delay".into(),
                opt(self.sim.scramble_max_delay),
            ),
            ("sim.pad_adc".into(), self.sim.pad_adc.to_string()),
            ("sim.rng_seed".into(), self.sim.rng_seed.to_string()),
            ("sim.sample_rate".into(), self.sim.sample_rate.to_string()),
            ("sim.idle_margin".into(), self.sim.idle_margin.to_string()),
            (
                "artifacts.noise_std".into(),
                self.artifacts.noise_std.to_string(),
            ),
            (
                "artifacts.target_rate".into(),
                opt(self.artifacts.target_rate),
            ),
            ("artifacts.seed".into(), self.artifacts.seed.to_string()),
            (
                "artifacts.noise_after_resample".into(),
                self.artifacts.noise_after_resample.to_string(),
            ),
            ("detector.sigma_k".into(), self.detector.sigma_k.to_string()),
            ("detector.kappa".into(), self.detector.kappa.to_string()),
            (
                "detector.idle_window".into(),
                self.detector.idle_window.to_string(),
            ),
            (
                "detector.min_significance".into(),
                self.detector.min_significance.to_string(),
            ),
        ])
        .chain(self.hw.iter().map(|(k, v)| (format!("hw.{k}"), v.clone())))
        .chain([
            ("run.network".into(), self.network.clone()),
            (
                "run.weights".into(),
                self.weights
                    .as_ref()
                    .map_or("random".into(), |p| p.display().to_string()),
            ),
            ("run.weight_seed".into(), self.weight_seed.to_string()),
        ])
        .chain(match &self.images {
            ImageSource::Synthetic { count, seed } => {
                vec![
                    ("run.image_seed".into(), seed.to_string()),
                    ("run.images".into(), count.to_string()),
                ]
            }
            ImageSource::Cifar { path, count } => {
                vec![
                    ("run.cifar".into(), path.display().to_string()),
                    ("run.images".into(), count.to_string()),
                ]
            }
        })
        .chain([
            ("matrix.rates".into(), list(&self.matrix_rates)),
            ("matrix.noises".into(), list(&self.matrix_noises)),
        ])
        .collect();
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// The public subset of the tile and technology description.
pub fn hw_from_datasheet(tile: &TileConfig, tech: &TechnologyModel, input: Shape) -> HwKnowledge {
    HwKnowledge {
        array_rows: tile.array_rows,
        array_cols: tile.array_cols,
        adc_count: tile.adc_count,
        adc_bits: tile.adc_bits,
        cells_per_weight: tile.cells_per_weight,
        input_bits: 8,
        serial_clock_hz: tech.serial_clock_hz,
        digital_clock_hz: tech.digital_clock_hz,
        adc_step_time: tech.adc_step_time,
        settle_time: tech.settle_time,
        handoff_clocks: tech.handoff_clocks,
        input,
    }
}

impl HwKnowledge {
    /// Sets one field by name, as in a `hw.*` config key.
    pub fn set(&mut self, field: &str, v: &str) -> Result<()> {
        let key = format!("hw.{field}");
        match field {
            "array_rows" => self.array_rows = parse(&key, v)?,
            "array_cols" => self.array_cols = parse(&key, v)?,
            "adc_count" => self.adc_count = parse(&key, v)?,
            "adc_bits" => self.adc_bits = parse(&key, v)?,
            "cells_per_weight" => self.cells_per_weight = parse(&key, v)?,
            "input_bits" => self.input_bits = parse(&key, v)?,
            "serial_clock_hz" => self.serial_clock_hz = parse(&key, v)?,
            "digital_clock_hz" => self.digital_clock_hz = parse(&key, v)?,
            "adc_step_time" => self.adc_step_time = parse(&key, v)?,
            "settle_time" => self.settle_time = parse(&key, v)?,
            "handoff_clocks" => self.handoff_clocks = parse(&key, v)?,
            "input" => {
                self.input = crate::netspec::parse_shape(v)
                    .map_err(|m| Error::Config(format!("{key}: {m}")))?
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let mut back = RunConfig::default();
        back.tile.array_rows = 7;
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\ntile.adc_count = 8  # more ADCs\n\nsim.pad_adc = true\nsim.scramble_max_delay = 2e-7\n")
            .unwrap();
        cfg.apply_override("tech.lut.router=3e-15, 1e-15").unwrap();
        cfg.apply_override("matrix.rates = 1e9,2e8").unwrap();
        assert_eq!(cfg.tile.adc_count, 8);
        assert!(cfg.sim.pad_adc);
        assert_eq!(cfg.sim.scramble_max_delay, Some(2e-7));
        assert_eq!(
            cfg.tech.digital_energy_lut.get(DigitalKind::Router),
            (3e-15, 1e-15)
        );
        assert_eq!(cfg.matrix_rates, vec![1e9, 2e8]);
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("tile.rows", "3"), Err(Error::Config(_))));
        assert!(matches!(
            cfg.set("tile.array_rows", "many"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            cfg.set("sim.pad_adc", "maybe"),
            Err(Error::Config(_))
        ));
        assert!(matches!(cfg.set("hw.colour", "red"), Err(Error::Config(_))));
        assert!(cfg.set("norow", "1").is_err());
        let err = cfg.apply_text("tile.adc_bits = 8\nnonsense\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn hw_follows_datasheet_then_overrides() {
        let mut cfg = RunConfig::default();
        cfg.set("tile.adc_count", "8").unwrap();
        let hw = cfg.hw_knowledge(Shape::new(3, 32, 32)).unwrap();
        assert_eq!(hw.adc_count, 8);
        assert_eq!(hw.max_conversions(), 8);
        cfg.set("hw.adc_count", "4").unwrap();
        cfg.set("hw.input", "1x28x28").unwrap();
        let hw = cfg.hw_knowledge(Shape::new(3, 32, 32)).unwrap();
        assert_eq!(hw.adc_count, 4);
        assert_eq!(hw.input, Shape::new(1, 28, 28));
        assert_eq!(
            hw_from_datasheet(
                &TileConfig::default(),
                &TechnologyModel::default(),
                Shape::new(3, 32, 32)
            ),
            HwKnowledge::default()
        );
    }

    #[test]
    fn seed_reaches_every_stream() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(9);
        assert_eq!(
            (cfg.weight_seed, cfg.sim.rng_seed, cfg.artifacts.seed),
            (9, 9, 9)
        );
        assert_eq!(cfg.images, ImageSource::Synthetic { count: 1, seed: 9 });
    }
}
