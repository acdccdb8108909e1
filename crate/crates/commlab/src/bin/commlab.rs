//! Command-line front end: `run`, `sweep`, and `compare` over TOML
//! configs. Exit codes: 0 success, 1 validation error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commlab::config::parse_config;
use commlab::runner;
use commlab::Error;

#[derive(Parser)]
#[command(name = "commlab", version, about = "Discrete vs. continuous agent communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; optional if --set covers the required fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set epochs=10 --set dataset.side=12.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(ConfigArgs),
    /// Run the config once per token count, in subdirectories of --out.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated token counts, e.g. 1,2,4,8,16,32.
        #[arg(long, value_delimiter = ',', required = true)]
        tokens: Vec<usize>,
    },
    /// Summarize communication loss across stored report directories.
    Compare {
        /// Report directories (at least two).
        dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch() -> commlab::Result<()> {
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = parse_config(
                args.config.as_deref(),
                &args.sets,
                args.seed,
                args.out.as_deref(),
            )?;
            let summary = runner::run(&cfg)?;
            println!("report written to {}", summary.output_dir.display());
            if let Some(loss) = summary.communication_loss {
                println!("communication_loss = {loss}");
            }
            Ok(())
        }
        Command::Sweep { config, tokens } => {
            let cfg = parse_config(
                config.config.as_deref(),
                &config.sets,
                config.seed,
                config.out.as_deref(),
            )?;
            let root = cfg.output_dir.clone();
            let summaries = runner::sweep(&cfg, &tokens, &root)?;
            for summary in summaries {
                match summary.communication_loss {
                    Some(loss) => println!(
                        "{}: communication_loss = {loss}",
                        summary.output_dir.display()
                    ),
                    None => println!("{}: done", summary.output_dir.display()),
                }
            }
            Ok(())
        }
        Command::Compare { dirs } => {
            let table = runner::compare(&dirs)?;
            print!("{}", table.render());
            Ok(())
        }
    }
}
