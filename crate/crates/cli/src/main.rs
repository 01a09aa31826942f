//! `imcsca`: simulate a tiled RRAM accelerator, degrade its power traces,
//! extract the network architecture from them and score the result.
//!
//! Exit codes: 0 success or match, 1 usage or configuration error,
//! 2 simulation error, 3 attack failure, 4 comparison mismatch.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};

use imcsca::attack::{compare, run_attack};
use imcsca::config::RunConfig;
use imcsca::mapper::map_network;
use imcsca::netspec::NetworkSpec;
use imcsca::powersim::{sar_convert, simulate_inference, SimOutput};
use imcsca::robustness::{robustness_matrix, truth_layers};
use imcsca::trace::{trace_files, PowerTrace, TraceFormat, BINARY_EXT};

#[derive(Parser)]
#[command(
    name = "imcsca",
    version,
    about = "RRAM accelerator power simulator and architecture-extraction attack"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set tile.adc_count=8`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds weights, images, simulator and artifact noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Binary,
}

impl From<Format> for TraceFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => TraceFormat::Text,
            Format::Binary => TraceFormat::Binary,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run inference on the simulated accelerator and record per-tile traces.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: Format,
    },
    /// Add measurement noise and reduce the sample rate of a trace directory.
    Inject {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise standard deviation, watts.
        #[arg(long)]
        noise: Option<f64>,
        /// Target sample rate, Sa/s.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Extract the architecture from a trace directory. Takes no ground truth.
    Attack {
        #[arg(long)]
        traces: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an extracted report with a ground-truth network file.
    Compare {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Conversion energy of the SAR ADC for every output code, as CSV.
    AdcEnergy {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attack success over a grid of sample rates and noise levels.
    Matrix {
        /// CSV of the cells.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

const USAGE: u8 = 1;
const SIMULATION: u8 = 2;
const ATTACK: u8 = 3;
const MISMATCH: u8 = 4;

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            err: e.into(),
        })
    }
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn simulate(
    cfg: &RunConfig,
) -> anyhow::Result<(NetworkSpec, SimOutput, Vec<imcsca::mapper::TileMapping>)> {
    let net = cfg.network_spec()?;
    let weights = cfg.quantized_weights(&net)?;
    let mappings = map_network(&net, &weights, &cfg.tile)?;
    let images = cfg.load_images(net.input)?;
    let out = simulate_inference(&mappings, &net, &images, &cfg.tile, &cfg.tech, &cfg.sim)?;
    Ok((net, out, mappings))
}

fn cmd_simulate(cfg: &RunConfig, out: &Path, format: TraceFormat) -> Result<(), Failure> {
    let (net, sim, _) = simulate(cfg).code(SIMULATION)?;
    let dir = out.join("traces");
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .code(SIMULATION)?;
    imcsca::trace::write_trace_dir(&dir, &sim.traces, format).code(SIMULATION)?;
    fs::write(out.join("ground_truth.net"), net.to_string()).code(SIMULATION)?;
    sim.events
        .write_csv(out.join("events.csv"))
        .code(SIMULATION)?;
    let mut logits = String::new();
    for (i, inf) in sim.outputs.iter().enumerate() {
        let vals: Vec<String> = inf.logits().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(logits, "{i}: {}", vals.join(" "));
    }
    fs::write(out.join("logits.txt"), logits).code(SIMULATION)?;
    fs::write(out.join("run.cfg"), cfg.to_text()).code(SIMULATION)?;
    eprintln!(
        "{} tiles, {} events -> {}",
        sim.traces.len(),
        sim.events.events.len(),
        out.display()
    );
    Ok(())
}

fn cmd_inject(
    cfg: &RunConfig,
    traces: &Path,
    out: &Path,
    noise: Option<f64>,
    rate: Option<f64>,
) -> Result<(), Failure> {
    let mut spec = cfg.artifacts.clone();
    if let Some(n) = noise {
        spec.noise_std = n;
    }
    if rate.is_some() {
        spec.target_rate = rate;
    }
    let files = trace_files(traces)
        .with_context(|| format!("listing {}", traces.display()))
        .code(USAGE)?;
    if files.is_empty() {
        return Err(Failure {
            code: USAGE,
            err: anyhow::anyhow!("no trace files in {}", traces.display()),
        });
    }
    fs::create_dir_all(out).code(USAGE)?;
    for f in files {
        let t = PowerTrace::read(&f)
            .with_context(|| format!("reading {}", f.display()))
            .code(USAGE)?;
        let format = if f.extension().is_some_and(|e| e == BINARY_EXT) {
            TraceFormat::Binary
        } else {
            TraceFormat::Text
        };
        let d = spec.apply(&t).code(USAGE)?;
        d.write(out.join(d.file_name(format)), format).code(USAGE)?;
    }
    Ok(())
}

fn cmd_attack(cfg: &RunConfig, traces: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let files = trace_files(traces)
        .with_context(|| format!("listing {}", traces.display()))
        .code(USAGE)?;
    let traces: Vec<PowerTrace> = files
        .iter()
        .map(PowerTrace::read)
        .collect::<Result<_, _>>()
        .code(USAGE)?;
    let hw = cfg
        .hw_knowledge(imcsca::attack::HwKnowledge::default().input)
        .code(USAGE)?;
    let arch = run_attack(&traces, &hw, &cfg.detector).code(ATTACK)?;
    write_or_print(out, &arch.report()).code(USAGE)
}

fn cmd_compare(report: &Path, truth: &Path) -> Result<(), Failure> {
    let ex = NetworkSpec::load(report)
        .with_context(|| format!("reading {}", report.display()))
        .code(USAGE)?;
    let tr = NetworkSpec::load(truth)
        .with_context(|| format!("reading {}", truth.display()))
        .code(USAGE)?;
    let r = compare(&ex, &tr);
    println!("{r}");
    if r.is_match() {
        Ok(())
    } else {
        Err(Failure {
            code: MISMATCH,
            err: anyhow::anyhow!("{} field(s) differ", r.mismatches.len()),
        })
    }
}

fn cmd_adc_energy(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    cfg.tech.validate(cfg.tile.adc_bits).code(USAGE)?;
    let levels = 1u32 << cfg.tile.adc_bits;
    let mut s = String::from("code,v_in,energy_j\n");
    for code in 0..levels {
        // centre of the code's input bin
        let v = (code as f64 + 0.5) / levels as f64 * cfg.tech.v_ref;
        let _ = writeln!(
            s,
            "{code},{v:e},{:e}",
            sar_convert(v, &cfg.tech).total_signed()
        );
    }
    write_or_print(out, &s).code(USAGE)
}

fn cmd_matrix(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let (net, sim, mappings) = simulate(cfg).code(SIMULATION)?;
    let truth = truth_layers(&net, &mappings);
    let hw = cfg.hw_knowledge(net.input).code(USAGE)?;
    let m = robustness_matrix(
        &sim.traces,
        &cfg.matrix_rates,
        &cfg.matrix_noises,
        cfg.artifacts.seed,
        &truth,
        &hw,
        &cfg.detector,
    )
    .code(ATTACK)?;
    println!("{m}");
    println!("monotone: {}", m.is_monotone());
    println!("fails at FC first: {}", m.fails_at_fc_first());
    if let Some(p) = out {
        fs::write(p, m.to_csv()).code(USAGE)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common).code(USAGE)?;
    match cli.cmd {
        Cmd::Simulate { out, format } => cmd_simulate(&cfg, &out, format.into()),
        Cmd::Inject {
            traces,
            out,
            noise,
            rate,
        } => cmd_inject(&cfg, &traces, &out, noise, rate),
        Cmd::Attack { traces, out } => cmd_attack(&cfg, &traces, out.as_deref()),
        Cmd::Compare { report, truth } => cmd_compare(&report, &truth),
        Cmd::AdcEnergy { out } => cmd_adc_energy(&cfg, out.as_deref()),
        Cmd::Matrix { out } => cmd_matrix(&cfg, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
