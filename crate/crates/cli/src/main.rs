use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use cil_cli::config::{load_config, schema};
use cil_cli::grid::{read_cell_results, run_grid};
use cil_cli::inspect::summary_table;
use cil_cli::plot::{plot_ablation, plot_trend};

#[derive(Parser)]
#[command(name = "cil", version, about = "Class-incremental intent classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment grid and write summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key.path=value`, applied before validation; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Results directory (one subdirectory per run).
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Render figures from finished results.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print mean ± std of last/avg accuracy per configuration.
    Inspect {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Print the JSON Schema of the config file.
    Schema,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Trend,
    Ablation,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides, out } => {
            let cfg = load_config(&config, &overrides)?;
            let results = run_grid(&cfg, &overrides, &out)?;
            print!("{}", summary_table(&results));
            println!("wrote {}", out.join("summary.csv").display());
        }
        Command::Plot { kind, results, out } => {
            let file = match kind {
                PlotKind::Trend => plot_trend(&results, &out)?,
                PlotKind::Ablation => plot_ablation(&results, &out)?,
            };
            println!("wrote {}", file.display());
        }
        Command::Inspect { results } => {
            print!("{}", summary_table(&read_cell_results(&results)?));
        }
        Command::Schema => {
            println!("{}", serde_json::to_string_pretty(&schema())?);
        }
    }
    Ok(())
}
