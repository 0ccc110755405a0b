//! The `fbc` command line: data generation, training, probing, β sweeps and
//! embedding export. Each command is a plain function so tests and other
//! programs can drive it without a subprocess.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::{
    cmd_export_embeddings, cmd_gen_data, cmd_probe, cmd_sweep, cmd_train, ProbeOutcome, SweepOutcome, TrainOutcome,
};
pub use config::{DataSource, MethodGrid, RunConfig, SweepSpec};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "fbc", version, about = "Fair representations by binary compression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a dataset and write it as a bundle directory.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and per-step trace.
    Train(RunArgs),
    /// Fit auditors and a task probe on a frozen checkpoint.
    Probe(ProbeArgs),
    /// Train and probe every (method, β, seed) of a grid.
    Sweep(SweepArgs),
    /// Write the representation of every sample with its `s` and `y`.
    ExportEmbeddings(ProbeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    SyntheticTabular,
    DspritesUnfair,
}

#[derive(Clone, Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: GeneratorKind,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Image side length (dsprites-unfair only).
    #[arg(long)]
    pub res: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON config whose `data` entry supplies the remaining generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by commands that resolve a full run configuration.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `fbc` or `bvae`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset bundle written by `gen-data`; replaces the config's data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the `config.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Default, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep only this method's grid.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Concurrent runs; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args).map(drop),
        Command::Train(args) => cmd_train(&args).map(drop),
        Command::Probe(args) => cmd_probe(&args).map(drop),
        Command::Sweep(args) => cmd_sweep(&args).map(drop),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(&args).map(drop),
    }
}
