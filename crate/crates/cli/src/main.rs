use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "fbnn", version, about = "Fully-binarized networks with class-incremental replay")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Global {
    /// TOML run configuration; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces the configured seed list with a single seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory (CIFAR-100 binary files).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Scenario strategy, e.g. er-native.
    #[arg(long, global = true)]
    pub strategy: Option<String>,
    /// Replay budget in megabits (10⁶ bits).
    #[arg(long, global = true)]
    pub buffer_mb: Option<f64>,
    /// Allows runs on real datasets, which take hours.
    #[arg(long, global = true)]
    pub extended: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Trains one model on every class at once.
    Offline,
    /// Runs the pre-training phase and saves the model.
    Pretrain,
    /// Runs class-incremental scenarios for every configured seed.
    Cil {
        /// Continues from a scenario checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Runs the Native/Latent iso-memory sweep instead.
        #[arg(long)]
        iso: bool,
    },
    /// Evaluates a saved model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Prints the binary encoding of an image.
    Encode {
        /// PNG or PNM image.
        #[arg(long, conflicts_with_all = ["synthetic", "pixel"])]
        image: Option<PathBuf>,
        /// Uses the first synthetic sample of class 0.
        #[arg(long)]
        synthetic: bool,
        /// A single pixel given as R,G,B.
        #[arg(long, value_delimiter = ',')]
        pixel: Option<Vec<u8>>,
        /// Pixels to print in full.
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Offline => commands::offline(&cli.global),
        Command::Pretrain => commands::pretrain(&cli.global),
        Command::Cil { resume, iso } => commands::cil(&cli.global, resume.as_deref(), iso),
        Command::Eval { model } => commands::eval(&cli.global, &model),
        Command::Encode {
            image,
            synthetic,
            pixel,
            limit,
        } => commands::encode(&cli.global, image.as_deref(), synthetic, pixel, limit),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<fbnn::Error>() {
                Some(fbnn::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
