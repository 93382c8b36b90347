mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use crate::config::{Layers, RunConfig, SEED_ENV};
use crate::error::CliResult;

/// Optimal and learned dispatch of a storage device in a PV microgrid.
///
/// Every setting is a `key = value` entry; values come from the defaults,
/// then `--config`, then the command line (`--set key=value` or the
/// dedicated flags below).
#[derive(Debug, Parser)]
#[command(name = "storage-dispatch", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<String>,

    /// is, ls, lt or all.
    #[arg(long, global = true)]
    case: Option<String>,

    /// Episode CSV.
    #[arg(long, global = true)]
    data: Option<String>,

    #[arg(long = "out-dir", global = true)]
    out_dir: Option<String>,

    /// More log output (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic episode dataset.
    GenData {
        #[arg(long)]
        n_episodes: Option<String>,
        /// Output CSV; same as `--data`.
        #[arg(long)]
        out: Option<String>,
    },
    /// Run a classical solver on the test partition.
    Solve {
        /// sp, pmp or dp.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train a Q table per case on the training partition.
    Train {
        #[arg(long)]
        episodes: Option<String>,
    },
    /// Compare the trained policy and an idle policy with the classical baseline.
    Eval {
        #[arg(long)]
        qtable: Option<String>,
    },
    /// Write one day's dispatch under every method as a single CSV.
    Export {
        /// Episode id; defaults to the first test episode.
        #[arg(long)]
        episode: Option<String>,
        #[arg(long)]
        qtable: Option<String>,
    },
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut layers = Layers::default();
    if let Some(path) = &cli.config {
        layers.load_file(path)?;
    }
    for a in &cli.set {
        layers.set_assignment(a)?;
    }
    let mut flags: Vec<(&str, &Option<String>)> = vec![
        ("seed", &cli.seed),
        ("case", &cli.case),
        ("data", &cli.data),
        ("out_dir", &cli.out_dir),
    ];
    match &cli.command {
        Command::GenData { n_episodes, out } => {
            flags.push(("n_episodes", n_episodes));
            flags.push(("data", out));
        }
        Command::Solve { method } => flags.push(("method", method)),
        Command::Train { episodes } => flags.push(("episodes", episodes)),
        Command::Eval { qtable } => flags.push(("qtable", qtable)),
        Command::Export { episode, qtable } => {
            flags.push(("episode", episode));
            flags.push(("qtable", qtable));
        }
    }
    for (key, value) in flags {
        if let Some(v) = value {
            layers.set_cli(key, v)?;
        }
    }
    let env_seed = std::env::var(SEED_ENV).ok();
    RunConfig::from_values(layers.resolve(env_seed.as_deref()))
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg),
        Command::Solve { .. } => commands::solve(&cfg),
        Command::Train { .. } => commands::train_cmd(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Export { .. } => commands::export(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
