use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "artlab", version, about = "Art-free text-to-image toolkit with few-shot style adapters")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML file with one table per command; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Validate inputs and configuration without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic labeled corpus or a palette-style exemplar set.
    Synth(commands::SynthArgs),
    /// Pretrain the image-text scorer used by the filter and metrics.
    TrainScorer(commands::TrainScorerArgs),
    /// Caption keyword and image-concept filtering of a corpus manifest.
    Filter(commands::FilterArgs),
    TrainCodec(commands::TrainCodecArgs),
    TrainBase(commands::TrainBaseArgs),
    TrainAdapter(commands::TrainAdapterArgs),
    Generate(commands::GenerateArgs),
    Stylize(commands::StylizeArgs),
    Evaluate(commands::EvaluateArgs),
    Attribute(commands::AttributeArgs),
    ProbeInversion(commands::ProbeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
