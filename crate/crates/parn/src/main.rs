//! Command-line front end: synthesize traces, run sync filters, solve
//! epochs, evaluate bounds and deviation sweeps, and run bundled presets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use parn::harness::{
    self, run_crlb_trace, run_monte_carlo, run_preset, run_solve_trace, run_sync_trace,
    PresetData, PresetKind, RunOverrides, SweepSpec, SweepVariable,
};
use parn::scenario::Scenario;
use parn::solver::SolveMode;
use parn::trace::{measurement_rows, truth_rows, write_csv};
use parn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "parn",
    about = "Simulation and estimation lab for periodic asymmetric ranging networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario TOML file; the bundled square scene when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory. The PARN_OUT_DIR environment variable overrides
    /// this flag.
    #[arg(long, default_value = "parn_out")]
    out: PathBuf,
}

impl CommonArgs {
    fn scenario(&self) -> Result<Scenario> {
        match &self.scenario {
            Some(path) => Scenario::load(path),
            None => Ok(Scenario::square_scene()),
        }
    }

    fn out_dir(&self) -> PathBuf {
        match std::env::var_os("PARN_OUT_DIR") {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize epochs and write raw measurements plus ground truth.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of sync periods to synthesize.
        #[arg(long, default_value_t = 100)]
        epochs: usize,
    },
    /// Run the per-anchor sync filters and write an estimate trace.
    Sync {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 3000)]
        epochs: usize,
    },
    /// Solve collected exchanges and write per-trial estimates.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Epochs discarded while the sync filters settle.
        #[arg(long, default_value_t = 1000)]
        warmup: u64,
        /// Solver modes to run: mode1, mode2, or both.
        #[arg(long, default_value = "both")]
        mode: String,
    },
    /// Write per-trial estimation bounds for collected exchanges.
    Crlb {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        warmup: u64,
        #[arg(long, default_value = "both")]
        mode: String,
    },
    /// Sweep an input deviation (or noise, or delay) and write aggregates.
    Deviate {
        #[command(flatten)]
        common: CommonArgs,
        /// Swept variable: velocity, drift, noise, or delay.
        #[arg(long)]
        variable: String,
        /// Comma-separated sweep values; a variable-specific default grid
        /// when omitted.
        #[arg(long)]
        values: Option<String>,
        /// Response delay in seconds (ignored for the delay variable).
        #[arg(long, default_value_t = 0.005)]
        delay: f64,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        warmup: u64,
    },
    /// Run a bundled or file-based preset and write results plus summary.
    Montecarlo {
        #[command(flatten)]
        common: CommonArgs,
        /// Bundled preset name or path to a preset TOML file.
        #[arg(long)]
        preset: String,
        /// Override the preset's trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// List bundled presets.
    Presets,
}

fn parse_modes(text: &str) -> Result<Vec<SolveMode>> {
    match text {
        "mode1" => Ok(vec![SolveMode::Mode1]),
        "mode2" => Ok(vec![SolveMode::Mode2]),
        "both" => Ok(vec![SolveMode::Mode1, SolveMode::Mode2]),
        other => Err(Error::Config(format!(
            "unknown mode {other}; expected mode1, mode2, or both"
        ))),
    }
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad sweep value {s}: {e}")))
        })
        .collect()
}

fn deviate_spec(
    variable: &str,
    values: Option<&str>,
    delay: f64,
    trials: usize,
    warmup: u64,
    seed: u64,
) -> Result<SweepSpec> {
    let (variable, default_values, modes) = match variable {
        "velocity" => (
            SweepVariable::VelocityDeviation,
            vec![0.0, 4.0, 8.0, 12.0, 16.0, 20.0],
            vec![SolveMode::Mode1],
        ),
        "drift" => (
            SweepVariable::DriftDeviation,
            vec![0.0, 1e-7, 2e-7, 3e-7, 4e-7, 5e-7],
            vec![SolveMode::Mode1],
        ),
        "noise" => (
            SweepVariable::MeasurementNoise,
            vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
            vec![SolveMode::Mode1, SolveMode::Mode2],
        ),
        "delay" => (
            SweepVariable::Delay,
            vec![0.001, 0.005, 0.01, 0.025],
            vec![SolveMode::Mode1],
        ),
        other => {
            return Err(Error::Config(format!(
                "unknown variable {other}; expected velocity, drift, noise, or delay"
            )))
        }
    };
    let values = match values {
        Some(text) => parse_values(text)?,
        None => default_values,
    };
    Ok(SweepSpec {
        variable,
        values,
        delay_s: delay,
        trials,
        warmup_epochs: warmup,
        modes,
        run_parn: true,
        run_carn: false,
        seed,
    })
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common, epochs } => {
            let scenario = common.scenario()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let mut sim = parn::scenario::Simulator::new(scenario, common.seed)?;
            let mut measurements = Vec::new();
            let mut truths = Vec::new();
            for _ in 0..epochs {
                let em = sim.step()?;
                measurements.extend(measurement_rows(&em));
                truths.extend(truth_rows(&em));
            }
            write_csv(out.join("measurements.csv"), &measurements)?;
            write_csv(out.join("truth.csv"), &truths)?;
            println!(
                "wrote {} measurement rows and {} truth rows to {}",
                measurements.len(),
                truths.len(),
                out.display()
            );
            Ok(true)
        }
        Command::Sync { common, epochs } => {
            let scenario = common.scenario()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let rows = run_sync_trace(&scenario, common.seed, epochs)?;
            write_csv(out.join("sync_estimates.csv"), &rows)?;
            println!("wrote {} sync estimate rows to {}", rows.len(), out.display());
            Ok(true)
        }
        Command::Solve { common, trials, warmup, mode } => {
            let scenario = common.scenario()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let modes = parse_modes(&mode)?;
            let rows = run_solve_trace(&scenario, common.seed, warmup, trials, &modes)?;
            write_csv(out.join("solve_estimates.csv"), &rows)?;
            println!("wrote {} solve rows to {}", rows.len(), out.display());
            Ok(true)
        }
        Command::Crlb { common, trials, warmup, mode } => {
            let scenario = common.scenario()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let modes = parse_modes(&mode)?;
            let rows = run_crlb_trace(&scenario, common.seed, warmup, trials, &modes)?;
            write_csv(out.join("crlb.csv"), &rows)?;
            println!("wrote {} bound rows to {}", rows.len(), out.display());
            Ok(true)
        }
        Command::Deviate { common, variable, values, delay, trials, warmup } => {
            let scenario = common.scenario()?;
            let out = common.out_dir();
            std::fs::create_dir_all(&out)?;
            let spec =
                deviate_spec(&variable, values.as_deref(), delay, trials, warmup, common.seed)?;
            let result = run_monte_carlo(&spec, &scenario)?;
            let path = out.join("results.csv");
            harness::write_sweep_csv(&path, &result.rows)?;
            println!("wrote {} sweep points to {}", result.rows.len(), path.display());
            Ok(true)
        }
        Command::Montecarlo { common, preset, trials } => {
            let scenario = match &common.scenario {
                Some(path) => Some(Scenario::load(path)?),
                None => None,
            };
            let config = harness::load_preset(&preset)?;
            let overrides = RunOverrides { seed: Some(common.seed), trials };
            let report = run_preset(&config, scenario.as_ref(), &overrides)?;
            let out = common.out_dir();
            let written = report.write_outputs(&out)?;
            println!(
                "preset {} finished in {:.2} s ({} rows)",
                report.name,
                report.elapsed_s,
                match &report.data {
                    PresetData::Sweep(r) => r.rows.len(),
                    PresetData::ClockTracking(r) => r.rows.len(),
                }
            );
            for check in &report.checks {
                println!("{check}");
            }
            for path in &written {
                println!("wrote {}", path.display());
            }
            Ok(report.passed())
        }
        Command::Presets => {
            for name in harness::preset_names() {
                let cfg = harness::builtin_preset(name)?;
                let kind = match cfg.kind {
                    PresetKind::Sweep => "sweep",
                    PresetKind::ClockTracking => "clock tracking",
                };
                println!("{name} ({kind}): {}", cfg.description);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
