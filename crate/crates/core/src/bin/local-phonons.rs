//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input, 2 numerical failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use local_phonons::chain::{ChainGeometry, TrapConfig};
use local_phonons::detection::{pnr_map_all, rabi_fit, DecayScaling, RabiFitOptions, RabiTrace};
use local_phonons::hilbert::HilbertSpec;
use local_phonons::pulses::{composite_cp, prep_sequence, Experiment, PulseSequence};
use local_phonons::scenarios::{
    calibrate_noise, pi_pulse_infidelity, run_scenario, sweep_blockade, ScenarioConfig, ScenarioKind, DEFAULT_G,
};
use local_phonons::{Error, Result};

#[derive(Parser)]
#[command(
    name = "local-phonons",
    version,
    about = "Local-phonon hopping and blockade simulator for trapped-ion chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Equilibrium positions, hopping rates and site shifts as JSON.
    Geometry {
        /// Scenario config file; only its [trap] table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the number of ions.
        #[arg(long)]
        ions: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment pipeline over the τ grid and emit CSV.
    Scenario {
        /// fig2, fig3, fig4, custom, or a full name such as fig2_blockade.
        name: String,
        #[arg(long)]
        blockade: bool,
        /// Closed system, no shot sampling.
        #[arg(long)]
        ideal: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV destination; a `.json` sidecar is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Leakage versus blockade strength.
    Sweep {
        /// Comma-separated blockade g values, rad/s (or multiples of κ with --kappa-units).
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        g_list: Vec<f64>,
        #[arg(long)]
        kappa_units: bool,
        /// fig2 or fig3.
        #[arg(long, default_value = "fig2")]
        scenario: String,
        #[arg(long)]
        ideal: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fock populations from a BSB Rabi trace CSV (time_s, p_down[, sigma, shots]).
    FitRabi {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        /// Calibrated ground-state g, rad/s.
        #[arg(long)]
        g: Option<f64>,
        #[arg(long, value_enum, default_value_t = Decay::Sqrt)]
        decay: Decay,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a pulse sequence.
    Sequence {
        #[arg(value_enum)]
        name: SequenceName,
        /// Print the sequence as JSON.
        #[arg(long, required = true)]
        dump: bool,
        #[arg(long, default_value_t = DEFAULT_G)]
        g: f64,
        /// Target ion for single-ion sequences.
        #[arg(long, default_value_t = 0)]
        ion: usize,
    },
    /// Dephasing rate for a target BSB π-pulse infidelity.
    Calibrate {
        #[arg(long, default_value_t = 0.12)]
        target: f64,
        #[arg(long, default_value_t = DEFAULT_G)]
        g: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Decay {
    Sqrt,
    Constant,
}

#[derive(Clone, Copy, ValueEnum)]
enum SequenceName {
    Composite,
    PnrMap,
    PrepFig2,
    PrepFig3,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::from_toml(&fs::read_to_string(p)?),
        None => Ok(ScenarioConfig::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Parse(e.to_string()))
}

#[derive(Serialize)]
struct GeometryReport {
    trap: TrapConfig,
    positions_m: Vec<f64>,
    nearest_separation_m: Vec<f64>,
    kappa_rad_s: Vec<Vec<f64>>,
    kappa_hz: Vec<Vec<f64>>,
    site_shift_rad_s: Vec<f64>,
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Geometry { config, ions, out } => {
            let mut trap = load_config(config.as_deref())?.trap;
            if let Some(n) = ions {
                trap.ion_count = n;
            }
            trap.validate()?;
            let geom = ChainGeometry::from_trap(&trap)?;
            let to_hz = |k: &Vec<f64>| k.iter().map(|v| v / (2.0 * std::f64::consts::PI)).collect();
            let report = GeometryReport {
                nearest_separation_m: geom.positions.windows(2).map(|w| w[1] - w[0]).collect(),
                kappa_hz: geom.kappa.iter().map(to_hz).collect(),
                positions_m: geom.positions,
                kappa_rad_s: geom.kappa,
                site_shift_rad_s: geom.site_shift,
                trap,
            };
            emit(out.as_deref(), &json(&report)?)
        }
        Command::Scenario { name, blockade, ideal, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            let kind = ScenarioKind::parse(&name)?;
            cfg.scenario = if blockade { kind.with_blockade(true) } else { kind };
            cfg.ideal_mode |= ideal;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let series = run_scenario(&cfg)?;
            match out {
                Some(p) => series.write(&p, &cfg),
                None => emit(None, &series.to_csv()?),
            }
        }
        Command::Sweep { g_list, kappa_units, scenario, ideal, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.scenario = ScenarioKind::parse(&scenario)?;
            cfg.ideal_mode |= ideal;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let scale = if kappa_units { ChainGeometry::from_trap(&cfg.trap)?.kappa_01() } else { 1.0 };
            let g: Vec<f64> = g_list.iter().map(|v| v * scale).collect();
            let table = sweep_blockade(&cfg, &g)?;
            emit(out.as_deref(), &table.to_csv()?)
        }
        Command::FitRabi { input, levels, g, decay, out } => {
            let trace = RabiTrace::from_csv(fs::File::open(&input)?)?;
            let scaling = match decay {
                Decay::Sqrt => DecayScaling::SqrtNPlusOne,
                Decay::Constant => DecayScaling::Constant,
            };
            let fit = rabi_fit(&trace, levels, &RabiFitOptions { g_hint: g, scaling, ..Default::default() })?;
            for w in &fit.warnings {
                log::warn!("{w}");
            }
            emit(out.as_deref(), &json(&fit)?)
        }
        Command::Sequence { name, dump: _, g, ion } => {
            let two = HilbertSpec::new(2, 4, 2)?;
            let geom = ChainGeometry::from_trap(&TrapConfig::default())?;
            let seq: PulseSequence = match name {
                SequenceName::Composite => composite_cp(ion, g),
                SequenceName::PnrMap => pnr_map_all(&two.with_levels(3), g)?,
                SequenceName::PrepFig2 => prep_sequence(Experiment::Fig2, &two, &geom, g)?,
                SequenceName::PrepFig3 => prep_sequence(Experiment::Fig3, &two, &geom, g)?,
            };
            seq.validate()?;
            emit(None, &(seq.to_json() + "\n"))
        }
        Command::Calibrate { target, g } => {
            let rates = calibrate_noise(target, g)?;
            #[derive(Serialize)]
            struct Report {
                target: f64,
                g: f64,
                rates: local_phonons::scenarios::NoiseRates,
                achieved_infidelity: f64,
            }
            let achieved = pi_pulse_infidelity(rates.pulse, g)?;
            emit(None, &json(&Report { target, g, rates, achieved_infidelity: achieved })?)
        }
    }
}
