//! `lynx`: train, sample, evaluate and prepare data from one config file.

/// `print!` that treats a closed stdout (e.g. `| head`) as success.
macro_rules! out {
    ($($t:tt)*) => {
        $crate::commands::emit(&format!($($t)*))?
    };
}

/// `println!` counterpart of [`out!`].
macro_rules! outln {
    ($($t:tt)*) => {
        $crate::commands::emit(&(format!($($t)*) + "\n"))?
    };
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lynx_core::LynxError;

use commands::{data, eval, inspect, sample, train};
use config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "lynx", version, about = "Identity-preserving video generation at desk scale")]
struct Cli {
    /// TOML run config; unset keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.lr=1e-3`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the image and video stages, checkpointing after each.
    Train(train::TrainArgs),
    /// Generate a clip of the person in a reference image.
    Sample(sample::SampleArgs),
    /// Score generated clips against the benchmark.
    Eval(eval::EvalArgs),
    /// Manifest tools.
    #[command(subcommand)]
    Data(data::DataCommand),
    /// Show how samples would be packed.
    InspectPack(inspect::InspectArgs),
    /// Print the effective config.
    Config,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Train(a) => train::run(&cfg, &a),
        Command::Sample(a) => sample::run(&cfg, &a),
        Command::Eval(a) => eval::run(&cfg, &a),
        Command::Data(c) => data::run(&cfg, &c),
        Command::InspectPack(a) => inspect::run(&cfg, &a),
        Command::Config => {
            out!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(
            LynxError::Config { .. } | LynxError::Manifest { .. } | LynxError::Schema { .. } | LynxError::Checkpoint(_),
        ) = cause.downcast_ref::<LynxError>()
        {
            return 2;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
