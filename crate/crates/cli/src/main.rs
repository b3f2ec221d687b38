use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

mod config;
mod error;
mod experiments;

use config::ExperimentConfig;
use error::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "GRADPHI_OUTPUT";
/// Version of the `result.json` and `manifest.json` layouts.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "gradphi", version, about = "Run gradient interface model experiments from TOML configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSV/JSON results and a manifest.
    Run {
        config: PathBuf,
        /// Overrides of the form `section.key=value`.
        overrides: Vec<String>,
    },
    /// Print an estimate of the cost of a run without running it.
    Plan { config: PathBuf, overrides: Vec<String> },
}

fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().map_err(|e| CliError::Config(e.to_string()))?;
    let outcome = pool.install(|| experiments::run(cfg))?;
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    write_table(&dir.join(&outcome.table), &outcome.header, &outcome.rows)?;
    let result = json!({
        "schema_version": SCHEMA_VERSION,
        "kind": cfg.kind.name(),
        "config": cfg,
        "result": outcome.result,
    });
    std::fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "workers": cfg.workers,
        "files": [outcome.table, "result.json"],
        "flags": outcome.flags,
        "wall_time_seconds": start.elapsed().as_secs_f64(),
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match cli.command {
        Command::Run { config, overrides } => ExperimentConfig::load(&config, &overrides).and_then(|cfg| run(&cfg)).map(|dir| println!("{}", dir.display())),
        Command::Plan { config, overrides } => ExperimentConfig::load(&config, &overrides).and_then(|cfg| {
            let p = experiments::plan(&cfg);
            println!("{}", serde_json::to_string_pretty(&p)?);
            Ok(())
        }),
    };
    match status {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
