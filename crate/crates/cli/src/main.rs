use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hermes_core::shuffle::{MatchingStrategy, PreferenceMatrix};
use hermes_core::simctl::{self, Method};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hermes", version, about = "Decentralized uplink spectrum access simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write timeseries.csv, summary.json and config.resolved.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<u64>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the summary of a run directory from its time series.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Solve a square preference matrix given as a JSON array of rows.
    Match {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::Maximin)]
        strategy: Strategy,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Maximin,
    Km,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string().trim_end() }));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "failed", "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Run {
            config,
            seed,
            frames,
            method,
            out,
        } => {
            let mut scenario = simctl::load_scenario_file(&config)?;
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            if let Some(frames) = frames {
                scenario.frames = frames;
            }
            if let Some(method) = method {
                scenario.method = method;
            }
            scenario.validate()?;
            let artifacts = simctl::run(&scenario)?;
            let out = out.unwrap_or_else(|| PathBuf::from("out"));
            simctl::write_outputs(&artifacts, &out)?;
            Ok(json!({ "out": out, "summary": artifacts.summary }))
        }
        Command::Analyze { input } => Ok(serde_json::to_value(simctl::analyze(&input)?)?),
        Command::Match { matrix, strategy } => {
            let text = fs::read_to_string(&matrix)
                .with_context(|| format!("reading {}", matrix.display()))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
                .with_context(|| format!("parsing {} as a JSON array of rows", matrix.display()))?;
            if rows.is_empty() {
                bail!("matrix is empty");
            }
            let e = PreferenceMatrix::from_rows(rows)?;
            let strategy = match strategy {
                Strategy::Maximin => MatchingStrategy::Maximin,
                Strategy::Km => MatchingStrategy::Km,
            };
            let m = strategy.solve(&e);
            Ok(json!({
                "assignment": m.assign,
                "total": m.total(&e),
                "bottleneck": m.bottleneck(&e),
            }))
        }
    }
}
