use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hedgeplan_cli::config::resolve_output;
use hedgeplan_cli::report::cmd_report;
use hedgeplan_cli::run::cmd_run;
use hedgeplan_cli::tools::{cmd_gen_data, cmd_gradcheck};
use hedgeplan_cli::{CliError, ExperimentConfig};

/// Contextual hedging-overlay planner.
///
/// Relative output paths are resolved against $HEDGE_OUTPUT_ROOT (default:
/// the working directory).
#[derive(Parser)]
#[command(name = "hedgeplan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Walk-forward every configured model and write the results directory.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set trainer.max_iterations=100`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Print the resolved config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Render charts and the comparison table from a results directory.
    Report { dir: PathBuf },
    /// Finite-difference check of every differentiable op and the policy
    /// composite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Flip the sign of one backward rule (mutation testing).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic market (prices.csv, context.csv, regimes.csv).
    GenData {
        preset: String,
        #[arg(long, default_value_t = 2000)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            set,
            print_config,
        } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            if print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let out = cmd_run(&cfg)?;
            println!("results in {}", out.display());
        }
        Command::Report { dir } => print!("{}", cmd_report(&resolve_output(&dir))?),
        Command::Gradcheck { seeds, inject_fault } => {
            let (text, failed) = cmd_gradcheck(seeds, inject_fault.as_deref())?;
            print!("{text}");
            if failed > 0 {
                return Err(CliError::ChecksFailed { failed });
            }
        }
        Command::GenData {
            preset,
            days,
            seed,
            out,
        } => {
            let out = resolve_output(&out);
            cmd_gen_data(&preset, days, seed, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
