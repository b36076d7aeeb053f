use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use madlab::divergence::DivergenceKind;
use madlab::harness::{run, Experiment, Overrides, RunConfig};

/// Desk-scale laboratory for debate-driven on-policy distillation.
#[derive(Debug, Parser)]
#[command(name = "madlab", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a named experiment into its output directory.
    Run {
        /// bounds | gradcheck | modes | debate-demo | opad
        #[arg(value_parser = parse_experiment)]
        experiment: Experiment,
        /// JSON config file with flat RunConfig keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// fwd | rev | jsd:<beta>
        #[arg(long, value_parser = parse_kind)]
        kind: Option<DivergenceKind>,
        /// Output directory (default runs/<experiment>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    s.parse().map_err(|e: madlab::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<DivergenceKind, String> {
    s.parse().map_err(|e: madlab::Error| e.to_string())
}

const EXIT_CONFIG: u8 = 1;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            LevelFilter::Info
        } else {
            LevelFilter::Warn
        })
        .init();
    let Command::Run {
        experiment,
        config,
        seed,
        kind,
        out,
    } = cli.command;
    let base = match &config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_CONFIG);
            }
        },
        None => RunConfig::default(),
    };
    let config = base.with_overrides(&Overrides {
        experiment: Some(experiment),
        seed,
        kind,
        out_dir: out,
    });
    match run(&config) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "out_dir": outcome.out_dir,
                    "status": outcome.status,
                    "summary": outcome.summary,
                    "abort": outcome.abort,
                }))
                .expect("summary serializes")
            );
            if let Some(abort) = &outcome.abort {
                eprintln!(
                    "numeric abort at iteration {}, step {}: {}",
                    abort.iteration, abort.step, abort.reason
                );
            }
            ExitCode::from(outcome.status.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
