use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metaisda_cli::commands::{cmd_compare, cmd_run, cmd_sweep, load_config};
use metaisda_cli::{CliError, ConfigBuilder};

#[derive(Parser)]
#[command(
    name = "metaisda",
    version,
    about = "Meta-learned semantic augmentation experiments"
)]
struct Cli {
    /// Output directory, overriding `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, overriding `seeds`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Training mode, overriding `mode`.
    #[arg(long, global = true)]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once per seed.
    Run { config: PathBuf },
    /// Train once per value of a config key.
    Sweep {
        config: PathBuf,
        param: String,
        /// Comma-separated values.
        values: String,
    },
    /// Compare ce_baseline, classwise_isda and meta on the same seeds.
    Compare { config: PathBuf },
}

fn builder(cli: &Cli, path: &Path) -> Result<ConfigBuilder, CliError> {
    let mut b = load_config(path)?;
    if let Some(out) = &cli.out {
        b.override_key("out", &out.to_string_lossy())?;
    }
    if let Some(seeds) = &cli.seeds {
        b.override_key("seeds", seeds)?;
    }
    if let Some(mode) = &cli.mode {
        b.override_key("mode", mode)?;
    }
    Ok(b)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = builder(cli, config)?.build()?;
            let s = cmd_run(&cfg)?;
            println!(
                "{}: final test accuracy {:.4} ± {:.4} over {} seed(s)",
                s.mode,
                s.mean,
                s.stddev,
                s.results.len()
            );
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let b = builder(cli, config)?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            println!("{param},mean_test_acc,stddev_test_acc,wall_clock_secs");
            for r in cmd_sweep(&b, param, &values)? {
                println!(
                    "{},{:.4},{:.4},{:.3}",
                    r.value, r.mean, r.stddev, r.wall_clock_secs
                );
            }
        }
        Command::Compare { config } => {
            let cfg = builder(cli, config)?.build()?;
            print!("{}", cmd_compare(&cfg)?.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("metaisda: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
