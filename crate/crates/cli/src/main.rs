use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ntk_lab::{Experiment, ExperimentConfig};

#[derive(clap::Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Parser)]
#[command(name = "ntk-lab", version, about = "Kernel-view adversarial robustness experiments")]
struct Args {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    #[command(about = "Gram matrix, spectrum and kernel predictions")]
    Gram(Common),
    #[command(about = "Gradient alignment and attack transfer between nets and their kernel")]
    Transfer(Common),
    #[command(about = "Attack a kernel predictor")]
    Attack(Common),
    #[command(about = "Usefulness and robustness of kernel features")]
    Features(Common),
    #[command(about = "Accuracy of predictors restricted to the most robust features")]
    Filter(Common),
    #[command(about = "Kernel dynamics of standard and adversarial training")]
    Dynamics(Common),
    #[command(about = "Adversarial training of a linearised network")]
    LinAdv(Common),
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (experiment, common) = match args.command {
        Sub::Gram(c) => (Experiment::Gram, c),
        Sub::Transfer(c) => (Experiment::Transfer, c),
        Sub::Attack(c) => (Experiment::Attack, c),
        Sub::Features(c) => (Experiment::Features, c),
        Sub::Filter(c) => (Experiment::Filter, c),
        Sub::Dynamics(c) => (Experiment::Dynamics, c),
        Sub::LinAdv(c) => (Experiment::LinAdv, c),
    };
    let result = common
        .config
        .as_deref()
        .map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::from_file)
        .and_then(|mut cfg| {
            if let Some(out) = common.out {
                cfg.out = Some(out);
            }
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let files = ntk_lab::run(experiment, &cfg)?;
            Ok((ntk_lab::output_dir(&cfg, experiment), files))
        });
    match result {
        Ok((dir, files)) => {
            println!("wrote {} files to {}", files.len() + 1, dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
