use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ozbias", version, about = "Surface-ozone model-bias pipeline")]
pub struct Cli {
    /// Worker threads (0 = all available cores). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate land-cover and population rasters into a land-use stack.
    Extract(ExtractArgs),
    /// Generate a seeded synthetic dataset with its raw ingredients.
    Synth(SynthArgs),
    /// Join chemistry stacks, model ozone and station observations into a dataset.
    Build(BuildArgs),
    /// Fit a U-Net or random forest on the training days of a dataset.
    Train(TrainArgs),
    /// Score a trained model on the evaluation days of a dataset.
    Evaluate(EvaluateArgs),
    /// Compare a random-forest report with a U-Net report.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Region {
    Europe,
    NorthAmerica,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Unet,
    Rf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Categorical land-cover raster.
    #[arg(long)]
    pub landcover: PathBuf,
    /// Continuous population raster.
    #[arg(long)]
    pub population: PathBuf,
    #[arg(long, value_enum, default_value = "europe")]
    pub region: Region,
    /// Value written into cells no pixel centre falls in.
    #[arg(long, default_value_t = 0.0)]
    pub fill_value: f64,
    /// Date tag of the stack.
    #[arg(long, default_value = "2016-01-01")]
    pub date: chrono::NaiveDate,
    /// Optional JSON listing cells that received the fill value.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Output .gstack file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 80)]
    pub days: usize,
    #[arg(long, default_value_t = 40)]
    pub stations: usize,
    /// 1 = chemistry only, 2 = chemistry plus land use.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub experiment: u8,
    #[arg(long, value_enum, default_value = "europe")]
    pub region: Region,
    /// Amplitude of the spatially correlated bias term.
    #[arg(long, default_value_t = 2.0)]
    pub g_amplitude: f64,
    #[arg(long, default_value_t = 2013)]
    pub start_year: i32,
    #[arg(long, default_value_t = 20)]
    pub days_per_summer: usize,
    /// Keep only the linear bias term.
    #[arg(long)]
    pub linear_only: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Directory of daily chemistry .gstack files.
    #[arg(long)]
    pub momo: PathBuf,
    /// Directory of daily model-ozone .mfield files.
    #[arg(long)]
    pub model_o3: PathBuf,
    /// Stations CSV (station_id,lat,lon,date,o3_ppb).
    #[arg(long)]
    pub stations: PathBuf,
    /// Land-use .gstack, required for experiment 2.
    #[arg(long)]
    pub landuse: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub experiment: u8,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Summer (June-August) held out for evaluation.
    #[arg(long, default_value_t = 2016)]
    pub eval_year: i32,
    /// Use every day of the dataset instead of splitting.
    #[arg(long)]
    pub all_days: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict a land-use dataset to the chemistry channels (1) or keep all (2).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub experiment: Option<u8>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// TOML file with `seed` and `[unet]` / `[forest]` tables; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print the loss of every epoch to standard error.
    #[arg(long)]
    pub verbose: bool,

    /// U-Net: channels of the first level [default: 32]
    #[arg(long, help_heading = "U-Net")]
    pub base_width: Option<usize>,
    /// U-Net: pooling levels [default: 2]
    #[arg(long, help_heading = "U-Net")]
    pub depth: Option<usize>,
    /// U-Net: dropout rate [default: 0.1]
    #[arg(long, help_heading = "U-Net")]
    pub dropout: Option<f64>,
    /// U-Net: learning rate [default: 0.01]
    #[arg(long, help_heading = "U-Net")]
    pub lr: Option<f64>,
    /// U-Net: weight decay [default: 0.001]
    #[arg(long, help_heading = "U-Net")]
    pub weight_decay: Option<f64>,
    /// U-Net: decay parameters directly instead of through the gradient
    #[arg(long, help_heading = "U-Net")]
    pub decoupled_weight_decay: bool,
    /// U-Net: clip each step's gradient to this global norm [default: none]
    #[arg(long, help_heading = "U-Net")]
    pub grad_clip: Option<f64>,
    /// U-Net: passes over the training days [default: 200]
    #[arg(long, help_heading = "U-Net")]
    pub epochs: Option<usize>,

    /// Forest: number of trees [default: 100]
    #[arg(long, help_heading = "Random forest")]
    pub trees: Option<usize>,
    /// Forest: maximum tree depth [default: unlimited]
    #[arg(long, help_heading = "Random forest")]
    pub max_depth: Option<usize>,
    /// Forest: minimum samples per leaf [default: 3]
    #[arg(long, help_heading = "Random forest")]
    pub min_leaf: Option<usize>,
    /// Forest: features tried per split [default: ceil(features / 3)]
    #[arg(long, help_heading = "Random forest")]
    pub features_per_split: Option<usize>,
    /// Forest: grow each tree on all samples instead of a bootstrap draw
    #[arg(long, help_heading = "Random forest")]
    pub no_bootstrap: bool,

    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model file written by `train` (either kind).
    #[arg(long)]
    pub model_file: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Name recorded in the report [default: unet or rf]
    #[arg(long)]
    pub name: Option<String>,
    /// Targets above this value (ppb) form the extreme subset.
    #[arg(long, default_value_t = 20.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = -40.0, allow_negative_numbers = true)]
    pub hist_lo: f64,
    #[arg(long, default_value_t = 60.0, allow_negative_numbers = true)]
    pub hist_hi: f64,
    #[arg(long, default_value_t = 2.0)]
    pub hist_width: f64,
    /// Output report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Random-forest report directory.
    #[arg(long)]
    pub rf: PathBuf,
    /// U-Net report directory.
    #[arg(long)]
    pub unet: PathBuf,
    /// Output comparison JSON.
    #[arg(long)]
    pub out: PathBuf,
}
