//! The `equibody` command-line pipeline: dataset generation, two-stage
//! training, evaluation, single-cloud inference and the property suite.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "EQUIBODY_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "equibody", version, about = "Rotation-equivariant body shape and pose estimation from point clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the train/val/test datasets and print their manifest.
    Gen(GenArgs),
    /// Train stage 1, stage 2, or both.
    Train(TrainArgs),
    /// Score checkpoints on datasets.
    Eval(EvalArgs),
    /// Estimate one body from one point cloud.
    Infer(InferArgs),
    /// Run the property suite with random weights.
    Check(CheckArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// Base configuration.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: config::Preset,
    /// TOML file layered over the preset; may name its own `preset`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set network.channels=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed (overrides the configuration).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<config::RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        config::resolve(self.preset, self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; must exist. Defaults to $EQUIBODY_DATA_DIR, then `data`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageSel {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory written by `gen`. Defaults to $EQUIBODY_DATA_DIR, then `data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for checkpoints and logs; created if missing.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Which stage(s) to run.
    #[arg(long, value_enum, default_value = "both")]
    pub stage: StageSel,
    /// Stage-1 checkpoint to start stage 2 from (required with `--stage 2`).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Rotate every stage-2 training cloud by a uniform random rotation.
    #[arg(long)]
    pub augment_so3: bool,
    /// Skip the per-epoch validation pass.
    #[arg(long)]
    pub no_val: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Further checkpoints to score on the same datasets; all runs land in one summary.
    #[arg(long, num_args = 1..)]
    pub compare: Vec<PathBuf>,
    /// Dataset files. Defaults to test-id.aqd and test-ood.aqd in the data directory.
    #[arg(long = "dataset", num_args = 1..)]
    pub datasets: Vec<PathBuf>,
    /// Data directory for the default datasets. Defaults to $EQUIBODY_DATA_DIR, then `data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also score copies of each dataset with every cloud rotated by a random group element drawn from this seed.
    #[arg(long, value_name = "SEED")]
    pub rotate_group: Option<u64>,
    /// Per-sample metrics CSV.
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Write the checkpoint's (epoch, V2V, MPJPE, accuracy) validation history here.
    #[arg(long, value_name = "PATH")]
    pub emit_plot_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Point cloud: whitespace-separated `x y z` lines, or an `.aqd` dataset with `--index`.
    #[arg(long)]
    pub input: PathBuf,
    /// Record to read from an `.aqd` input.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Output mesh.
    #[arg(long, default_value = "body.obj")]
    pub out: PathBuf,
    /// Output parameter dump (JSON).
    #[arg(long, default_value = "body.json")]
    pub params: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Run a single suite.
    #[arg(long, value_enum)]
    pub only: Option<checks::Suite>,
    /// Audit this `AQG1` group blob instead of the built-in group.
    #[arg(long)]
    pub group_file: Option<PathBuf>,
}

/// Runs a parsed command line, writing reports to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Gen(a) => commands::gen(&a, &mut out),
        Command::Train(a) => commands::train(&a, &mut out),
        Command::Eval(a) => commands::eval(&a, &mut out),
        Command::Infer(a) => commands::infer(&a, &mut out),
        Command::Check(a) => commands::check(&a, &mut out),
    }
}
