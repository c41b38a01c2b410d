//! `gaunet` command-line entry point.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "gaunet", version, about = "Gaussian-convolution counting networks: data, training, benchmarks, studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Global seed applied to every seed field of the command's config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; `manifest.json` is written here.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train and test datasets.
    GenData(Common),
    /// Train a model and write its checkpoint and report.
    Train(Common),
    /// Score a checkpoint on a dataset.
    Eval(Common),
    /// Time vanilla, low-rank and fast evaluation of one layer.
    Bench(Common),
    /// Across-replica count variance of both variants.
    StudyVariance(Common),
    /// Count accuracy under displaced training annotations.
    StudyNoise(Common),
    /// Render effective Gaussian filters of a checkpoint as PGM images.
    VizFilters(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, run): (_, _, fn(&Common, &mut manifest::Run) -> anyhow::Result<()>) = match &cli.command {
        Command::GenData(c) => ("gen-data", c, commands::gen_data),
        Command::Train(c) => ("train", c, commands::train),
        Command::Eval(c) => ("eval", c, commands::eval),
        Command::Bench(c) => ("bench", c, commands::bench),
        Command::StudyVariance(c) => ("study-variance", c, commands::study_variance),
        Command::StudyNoise(c) => ("study-noise", c, commands::study_noise),
        Command::VizFilters(c) => ("viz-filters", c, commands::viz_filters),
    };
    let mut state = match manifest::Run::new(name, &common.out) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let outcome = run(common, &mut state);
    let finished = state.finish(&outcome);
    match (outcome, finished) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Err(e), _) | (Ok(()), Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
