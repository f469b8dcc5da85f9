use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lem_guard::cli_io::{emit_results, ingest_timeseries, read_results, CliIoError, IngestOptions};
use lem_guard::forecast::{train_models, write_round_log, ForecastModels};
use lem_guard::market::SolverChoice;
use lem_guard::scenario::{
    detect_offline, evaluation_set, federated_config, load_config, prepare, run_prepared, training_set, with_attacks,
    ScenarioConfig, SimulationResult,
};
use lem_guard::Error;

#[derive(Parser)]
#[command(name = "lemguard", version, about = "DER attack detection and market-based mitigation on LV feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (TOML); built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic training and evaluation measurements as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the four forecasters with federated averaging.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training measurements (CSV); synthetic when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the 24-hour closed loop and write the results.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        solver: Option<SolverChoice>,
        /// Measurements whose last day is simulated (CSV).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Offline detection on the last day of stored measurements.
    Detect {
        #[command(flatten)]
        common: Common,
        /// Measurements (CSV).
        #[arg(long)]
        input: PathBuf,
    },
    /// Write plot data from a stored results document.
    Report {
        /// Results document written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn config(common: &Common) -> Result<ScenarioConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| CliIoError::Io { path: dir.display().to_string(), source: e })?;
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    CliIoError::Io { path: path.display().to_string(), source: e }.into()
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), Error> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliIoError::Document(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

fn print_summary(r: &SimulationResult) {
    let s = &r.summary;
    let opt = |t: &Option<String>| t.clone().unwrap_or_else(|| "-".into());
    println!(
        "day {}  attack {}  flag {}  mitigation {}",
        r.day,
        opt(&s.attack_onset),
        opt(&s.flag_time),
        opt(&s.mitigation_time)
    );
    println!(
        "pre-attack import {:.2} kW [A {:.2}, B {:.2}, C {:.2}]",
        s.pre_attack_total_kw, s.pre_attack_pcc_kw[0], s.pre_attack_pcc_kw[1], s.pre_attack_pcc_kw[2]
    );
    println!(
        "at {}: nominal {:.2} kW, unmitigated {:.2} kW, mitigated {:.2} kW ({:.1}% lower), curtailment {:.2} kW",
        s.snapshot_time,
        s.nominal_total_kw,
        s.unmitigated_total_kw,
        s.mitigated_total_kw,
        s.reduction_pct,
        s.curtailment_total_kw
    );
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = config(&common)?;
            mkdir(&common.out)?;
            let train = common.out.join("training.csv");
            training_set(&cfg)?.write_csv(&train)?;
            let eval = common.out.join("evaluation.csv");
            let data = evaluation_set(&cfg)?;
            data.write_csv(&eval)?;
            println!("wrote {} and {}", train.display(), eval.display());
            if !cfg.attacks.is_empty() {
                let attacked = common.out.join("evaluation_attacked.csv");
                with_attacks(&data, &cfg.attacks)?.write_csv(&attacked)?;
                println!("wrote {} with {} attack(s) on the last day", attacked.display(), cfg.attacks.len());
            }
        }
        Command::Train { common, input } => {
            let mut cfg = config(&common)?;
            if input.is_some() {
                cfg.data.training_timeseries = input;
            }
            let data = training_set(&cfg)?;
            let (models, logs) = train_models(&data, &federated_config(&cfg))?;
            models.save_dir(&common.out)?;
            for l in &logs {
                let path = common.out.join(format!("{}_rounds.csv", l.name()));
                write_round_log(&path, &l.log, &l.client_ids).map_err(|e| io_err(&path, e))?;
                let last = l.log.last().map_or(f64::NAN, |r| r.global_loss);
                println!("{}: {} rounds, final loss {last:.5}", l.name(), l.log.len());
            }
            println!("models in {}", common.out.display());
        }
        Command::Simulate { common, solver, input } => {
            let mut cfg = config(&common)?;
            if let Some(s) = solver {
                cfg.solver = s;
            }
            if input.is_some() {
                cfg.data.timeseries = input;
            }
            cfg.validate()?;
            let result = run_prepared(&prepare(&cfg)?)?;
            emit_results(&result, &common.out)?;
            print_summary(&result);
            println!("results in {}", common.out.display());
        }
        Command::Detect { common, input } => {
            let cfg = config(&common)?;
            let data = ingest_timeseries(&input, &IngestOptions::default())?;
            let models = match &cfg.forecast.models_dir {
                Some(dir) => ForecastModels::load_dir(dir)?,
                None => train_models(&training_set(&cfg)?, &federated_config(&cfg))?.0,
            };
            let report = detect_offline(&models, &data, &cfg.detect, cfg.interval_min)?;
            mkdir(&common.out)?;
            let path = common.out.join("detection.json");
            write_json(&path, &report)?;
            let feeder = report.feeder_flag.as_ref().and_then(|f| f.onset.clone()).unwrap_or_else(|| "none".into());
            println!("{} node series flagged, feeder flag {feeder}", report.node_flags.len());
            println!("report in {}", path.display());
        }
        Command::Report { input, out } => {
            let result = read_results(&input)?;
            emit_results(&result, &out)?;
            print_summary(&result);
            println!("plot data in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
