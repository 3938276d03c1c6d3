//! Command-line front end: data generation, training, sampling, evaluation
//! and guidance ablations over reproducible, self-describing run directories.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod sample;
pub mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "inrmotion",
    version,
    about = "Keyframe in-betweening with latent diffusion over an INR motion VAE"
)]
pub struct Cli {
    /// TOML run configuration; `IMGMOTION_<SECTION>_<KEY>` variables override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural motion corpus.
    GenData(data::GenDataArgs),
    /// Train the INR VAE.
    TrainVae(train::TrainVaeArgs),
    /// Train the latent denoiser on a frozen VAE.
    TrainLdm(train::TrainLdmArgs),
    /// Draw motions from keyframes or a root trajectory.
    Sample(sample::SampleArgs),
    /// Score generated motions against a reference set.
    Evaluate(evaluate::EvaluateArgs),
    /// Guidance ablations: latent optimization curves or sampling sweeps.
    AblateGuidance(ablate::AblateArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => data::gen_data(cfg, a),
        Command::TrainVae(a) => train::train_vae(cfg, a),
        Command::TrainLdm(a) => train::train_ldm(cfg, a),
        Command::Sample(a) => sample::sample_cmd(cfg, a),
        Command::Evaluate(a) => evaluate::evaluate_cmd(cfg, a),
        Command::AblateGuidance(a) => ablate::ablate_cmd(cfg, a),
    }
}
