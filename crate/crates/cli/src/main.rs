mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixwb::error::ErrorClass;

/// Process exit status for a failed command.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: 3, message: message.into() }
    }

    /// Prefixes the message with the pipeline stage that failed.
    pub fn in_stage(mut self, stage: &str) -> Self {
        self.message = format!("{stage}: {}", self.message);
        self
    }
}

impl From<mixwb::Error> for CliError {
    fn from(e: mixwb::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "mixwb", version, about = "Mixed-illuminant auto white balance by blending preset renders")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixed-illuminant dataset with ground truth.
    #[command(after_help = config::defaults_help::<commands::SynthConfig>())]
    Synth(SynthArgs),
    /// Render the preset stack (fixed full render, small presets, mapped
    /// full presets) for every scene of a dataset.
    #[command(after_help = config::defaults_help::<commands::RenderConfig>())]
    RenderPresets(RenderArgs),
    /// Train the weight network on a dataset.
    #[command(after_help = config::defaults_help::<mixwb::train::TrainConfig>())]
    Train(TrainArgs),
    /// Correct one scene, one stack, or every scene of a stack set or dataset.
    #[command(after_help = config::defaults_help::<mixwb::infer::InferenceConfig>())]
    Infer(InferArgs),
    /// Score corrected images against ground truth.
    #[command(after_help = config::defaults_help::<commands::EvalConfig>())]
    Eval(EvalArgs),
    /// Compare inference variants and optional retrained models.
    #[command(after_help = config::defaults_help::<commands::AblateConfig>())]
    Ablate(AblateArgs),
    /// Synthesize (optional), train (optional), render, infer and evaluate.
    #[command(after_help = config::defaults_help::<commands::PipelineConfig>())]
    Pipeline(PipelineArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of scenes [default: 12].
    #[arg(long)]
    pub n: Option<usize>,
    /// Dataset seed [default: $MIXWB_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image width in pixels [default: 256].
    #[arg(long)]
    pub width: Option<usize>,
    /// Image height in pixels [default: 256].
    #[arg(long)]
    pub height: Option<usize>,
    /// Force these light temperatures (Kelvin, comma separated) in every scene.
    #[arg(long, value_delimiter = ',')]
    pub light_ccts: Option<Vec<f64>>,
    /// Force the camera white-balance temperature (Kelvin).
    #[arg(long)]
    pub camera_wb: Option<f64>,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the stacks.
    #[arg(long)]
    pub out: PathBuf,
    /// Ordered preset letters, e.g. tds or tfdcs [default: tds].
    #[arg(long)]
    pub presets: Option<String>,
    /// Side of the square small renders [default: 384].
    #[arg(long)]
    pub small_size: Option<usize>,
    /// Space for mapping fits: gamma or linear [default: gamma].
    #[arg(long)]
    pub fit_space: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.tar and history.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Ordered preset letters: tds or tfdcs [default: tds].
    #[arg(long)]
    pub presets: Option<String>,
    /// Patch size: 64, 128 or 256 [default: 64].
    #[arg(long)]
    pub patch: Option<usize>,
    /// Number of epochs [default: 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate [default: 0.0001].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Smoothness weight [default: 100].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Training seed [default: $MIXWB_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Network size: full or tiny [default: full].
    #[arg(long)]
    pub net: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A stack directory, a stack set from `render-presets`, a dataset from
    /// `synth`, or a single scene directory containing raw.png.
    #[arg(long)]
    pub stack: PathBuf,
    /// Output PNG for a single scene, or a directory for a set.
    #[arg(long)]
    pub out: PathBuf,
    /// Ensemble scales, descending [default: 1,0.5,0.25].
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    /// Use a single forward pass at scale 1.
    #[arg(long)]
    pub no_ensemble: bool,
    /// Skip edge-aware smoothing.
    #[arg(long)]
    pub no_eas: bool,
    /// Small render size when building stacks from raw scenes [default: 384].
    #[arg(long)]
    pub small_size: Option<usize>,
    /// Write the final weight maps as 16-bit grayscale PNGs here.
    #[arg(long)]
    pub dump_weights: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of <scene_id>.png predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory or directory of <scene_id>.png ground truths.
    #[arg(long)]
    pub gt: PathBuf,
    /// Method label in the report [default: method].
    #[arg(long)]
    pub label: Option<String>,
    /// Report path; report.txt is written next to it.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint of the reference model.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Held-out dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Training dataset; required by the retraining toggles.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also retrain with lambda = 0.
    #[arg(long)]
    pub retrain_lambda0: bool,
    /// Also train on the other preset set (tds <-> tfdcs).
    #[arg(long)]
    pub preset_toggle: bool,
    /// Also train at these patch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub patch_sweep: Option<Vec<usize>>,
    /// Epochs for retrained models [default: 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for retrained models [default: $MIXWB_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Small render size [default: 384].
    #[arg(long)]
    pub small_size: Option<usize>,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for synthesis and training [default: $MIXWB_SEED or 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out dataset; synthesized when absent.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Training dataset; synthesized when absent and no checkpoint is given.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    /// Use this checkpoint instead of training.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Synthesized training scenes [default: 40].
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Synthesized held-out scenes [default: 12].
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Ordered preset letters: tds or tfdcs [default: tds].
    #[arg(long)]
    pub presets: Option<String>,
    /// Training epochs [default: 30].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Network size: full or tiny [default: full].
    #[arg(long)]
    pub net: Option<String>,
    /// Patch size [default: 64].
    #[arg(long)]
    pub patch: Option<usize>,
    /// Use a single forward pass at scale 1.
    #[arg(long)]
    pub no_ensemble: bool,
    /// Skip edge-aware smoothing.
    #[arg(long)]
    pub no_eas: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::RenderPresets(a) => commands::render_presets(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Pipeline(a) => commands::pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
