use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rfs_swarm_cli::{bench_table, cmd_bench, cmd_run, cmd_validate, export, Format, RunManifest};

#[derive(Parser)]
#[command(name = "rfs-swarm", version, about = "Swarm control with Gaussian-mixture intensities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated subset of csv, json, svg.
        #[arg(long, value_delimiter = ',', default_value = "csv,json,svg")]
        format: Vec<Format>,
        /// Also write timing.json with wall-clock measurements.
        #[arg(long)]
        timing: bool,
    },
    /// Run each scenario with both controllers and compare them.
    Bench {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            format,
            timing,
        } => {
            let manifest = RunManifest {
                scenario,
                out_dir: out.clone(),
                formats: format,
                seed,
            };
            cmd_run(&manifest).and_then(|outcome| {
                if timing {
                    let path = out.join("timing.json");
                    std::fs::write(&path, export::timing_json(&outcome.log))
                        .map_err(|e| rfs_swarm_cli::CliError::Runtime(format!("{}: {e}", path.display())))?;
                }
                let errors = if outcome.log.steps.is_empty() {
                    Vec::new()
                } else {
                    outcome.log.final_errors()
                };
                let worst = errors.iter().copied().fold(0.0, f64::max);
                let mut out = std::io::stdout().lock();
                // a closed pipe on stdout is not a failure of the run
                let _ = writeln!(
                    out,
                    "{}: {} steps, {} controller, max final error {:.4}, {:.1} ms",
                    outcome.log.scenario,
                    outcome.log.steps.len(),
                    outcome.log.controller,
                    worst,
                    outcome.log.timing.total_ms
                );
                for f in &outcome.log.failures {
                    let _ = writeln!(out, "  step {}: {}", f.step, f.message);
                }
                for a in &outcome.artifacts {
                    let _ = writeln!(out, "  wrote {}", a.display());
                }
                Ok(())
            })
        }
        Command::Bench { scenarios, out } => cmd_bench(&scenarios, &out).map(|rows| {
            let _ = write!(std::io::stdout().lock(), "{}", bench_table(&rows));
        }),
        Command::Validate { scenario } => cmd_validate(&scenario).map(|s| {
            let _ = writeln!(std::io::stdout().lock(), "{}: ok ({})", scenario.display(), s.name);
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
