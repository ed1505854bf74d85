mod commands;
mod manifest;
mod signal;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const DATA_ROOT_ENV: &str = "CUTPASTE_DATA_ROOT";

/// Exit status of a finished invocation.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const DATA_OR_CONFIG: u8 = 2;
    pub const NUMERICAL: u8 = 3;
    pub const INTERRUPTED: u8 = 130;
}

#[derive(Debug, Parser)]
#[command(
    name = "cutpaste",
    version,
    about = "Self-supervised one-class defect detection and localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// ResNet-18-like backbone on 256x256 images.
    Full,
    /// Tiny CNN on 64x64 images.
    Desk,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Root seed for all random streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file with `[section]` headers.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings the config file and flags are applied to.
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    pub preset: Preset,
    /// Extra `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; receives the run manifest and all artifacts.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

/// Dataset location in the `<root>/<category>/{train,test,ground_truth}` layout.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root directory.
    #[arg(long, env = DATA_ROOT_ENV)]
    pub root: Option<PathBuf>,
    /// Category folder under the root.
    #[arg(long)]
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Augmentation {
    Cutpaste,
    CutpasteScar,
    Scar,
    CutoutGrey,
    CutoutMean,
    CutoutColor,
    Confetti,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Proxy task, e.g. binary_cutpaste, three_way, cutout_grey.
    #[arg(long)]
    pub task: Option<String>,
    /// `image` or `patch`.
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply one augmentation to an image and write the result plus a
    /// replayable JSON sidecar of its parameters.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        /// Input image.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_enum, default_value_t = Augmentation::Cutpaste)]
        aug: Augmentation,
        /// Side length the image is resized to; defaults to the working size.
        #[arg(long)]
        size: Option<usize>,
        /// Re-apply parameters from an earlier sidecar instead of sampling.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Output PNG; the sidecar goes next to it with a `.json` extension.
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a procedural texture dataset with shape defects.
    SynthGen {
        #[command(flatten)]
        common: Common,
        /// Destination root.
        #[arg(long, env = DATA_ROOT_ENV)]
        root: Option<PathBuf>,
        #[arg(long, default_value = "weave")]
        category: String,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 60)]
        n_test_normal: usize,
        /// Defective test images per shape.
        #[arg(long, default_value_t = 30)]
        n_test_per_shape: usize,
        /// Comma-separated shapes: square, ellipse, heart, digit0..digit9.
        #[arg(long, default_value = "square,ellipse", value_delimiter = ',')]
        shapes: Vec<String>,
        /// Fill defects with blob images instead of constant colors.
        #[arg(long)]
        natural_fill: bool,
    },
    /// Train a representation with a self-supervised proxy task.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Two-stage fine-tuning from a pretrained backbone checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint whose backbone weights initialize the model.
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Fit the density model on training embeddings and score the test split.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write heatmaps and raw pixel score maps for individual images.
    Localize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Images to localize; repeat the flag for several.
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        /// Saved patch Gaussian (from an earlier run); otherwise one is
        /// fitted on the dataset given by --root/--category.
        #[arg(long)]
        patch_model: Option<PathBuf>,
        #[arg(long, env = DATA_ROOT_ENV)]
        root: Option<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Evaluate a checkpoint, or train and evaluate `eval.n_seeds` models.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Evaluate this trained model instead of training new ones.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sweep one configuration key over several values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// `section.key` to vary.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Seeds per value.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
}

/// Parses `argv`, runs the command and returns the process exit status.
fn dispatch<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
        }
    };
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let stop = signal::install();
    match commands::run(cli.command, argv, stop) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(dispatch(std::env::args_os()))
}
