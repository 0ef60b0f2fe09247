//! `lmattack` command-line driver.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use landmark_attack::detector::ModelScale;
use serde::Serialize;

pub mod commands;
pub mod config;
pub mod plots;

pub use config::RunConfig;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    Usage(String),
    /// Anything that fails while running (exit 2).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<landmark_attack::Error> for CliError {
    fn from(e: landmark_attack::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lmattack", version, about = "Train landmark detectors and attack them with targeted iterative FGSM")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving run directories.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Model scale preset: desk or full.
    #[arg(long, global = true, value_parser = parse_preset)]
    pub preset: Option<ModelScale>,
}

fn parse_preset(s: &str) -> Result<ModelScale, String> {
    match s {
        "desk" => Ok(ModelScale::Desk),
        "full" => Ok(ModelScale::Full),
        _ => Err(format!("unknown preset {s:?}; expected desk or full")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Predict landmarks on images.
    Detect(DetectArgs),
    /// Attack one image with a target specification file.
    Attack(AttackArgs),
    /// Random-target sweep over iteration and epsilon budgets.
    Benchmark(BenchmarkArgs),
    /// Correlate landmark isolation with attack error from a benchmark run.
    Isolation(IsolationArgs),
    /// Re-render the three-panel figure of an attack run.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// ISBI dataset root; switches the data source to ISBI.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Synthetic training images.
    #[arg(long)]
    pub train_images: Option<usize>,
    /// Synthetic held-out images.
    #[arg(long)]
    pub test_images: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Start from the weights of an existing checkpoint instead of random initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files (any PNG or BMP).
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackOverrides {
    /// L∞ budget, in 8-bit levels unless the config says otherwise.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Step size, in normalized units unless the config says otherwise.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Use adaptive per-landmark weights (ATI); `--adaptive=false` forces plain TI.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub adaptive: Option<bool>,
    #[arg(long)]
    pub trace_every: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// JSON target file: {image_id, targets: [{index, x, y}]} with 1-based indices.
    #[arg(long)]
    pub targets: PathBuf,
    #[command(flatten)]
    pub attack: AttackOverrides,
    /// Perturbation amplification in the figure.
    #[arg(long, default_value_t = landmark_attack::data::DEFAULT_MAGNIFICATION)]
    pub magnification: f32,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub attempts: Option<usize>,
    #[arg(long)]
    pub max_images: Option<usize>,
    /// Comma-separated iteration counts, e.g. 20,50,100,300.
    #[arg(long, value_delimiter = ',')]
    pub iteration_grid: Option<Vec<usize>>,
    /// Comma-separated MODE:EPSILON cells, e.g. ati:8,ti:8.
    #[arg(long, value_parser = parse_cell_list)]
    pub cells: Option<CellList>,
    #[arg(long)]
    pub eta: Option<f64>,
}

/// Parsed `--cells` value.
#[derive(Debug, Clone, Serialize)]
pub struct CellList(pub Vec<landmark_attack::sweep::SweepCell>);

fn parse_cell_list(s: &str) -> Result<CellList, String> {
    config::parse_cells(s).map(CellList)
}

#[derive(Debug, Args, Serialize)]
pub struct IsolationArgs {
    /// Output directory of a benchmark run.
    #[arg(long)]
    pub benchmark: PathBuf,
    /// Cell to analyse, e.g. ati:8; defaults to the first adaptive cell with the largest epsilon.
    #[arg(long)]
    pub cell: Option<String>,
    /// Count every attempt, not only those where the landmark was targeted.
    #[arg(long)]
    pub all_attempts: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct VisualizeArgs {
    /// Output directory of an attack run.
    #[arg(long)]
    pub attack_dir: PathBuf,
    #[arg(long, default_value_t = landmark_attack::data::DEFAULT_MAGNIFICATION)]
    pub magnification: f32,
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I) -> Result<PathBuf, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(PathBuf::new());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let mut config = RunConfig::load(cli.global.config.as_deref(), cli.global.preset)?;
    if let Some(s) = cli.global.seed {
        config.seed = s;
    }
    if let Some(d) = &cli.global.out_dir {
        config.out_dir = d.clone();
    }
    match cli.command {
        Command::Train(a) => commands::train(config, &a),
        Command::Detect(a) => commands::detect(config, &a),
        Command::Attack(a) => commands::attack(config, &a),
        Command::Benchmark(a) => commands::benchmark(config, &a),
        Command::Isolation(a) => commands::isolation(config, &a),
        Command::Visualize(a) => commands::visualize(config, &a),
    }
}
