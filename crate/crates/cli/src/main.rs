mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cofor_core::dataset::JpegPolicy;
use cofor_core::PairSubset;

#[derive(Parser, Debug)]
#[command(name = "cofor", version, about = "Co-occurrence forensics: detect, attribute and localize GAN-generated images")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic texture corpus and its manifest.
    Synth(SynthArgs),
    /// Assign train/val/test splits by group, or plan a leave-one-out split.
    Split(SplitArgs),
    /// Write co-occurrence tensors for images to a feature dump.
    Extract(ExtractArgs),
    /// Train a detection or attribution model.
    Train(TrainArgs),
    /// Score images as authentic or generated.
    Detect(PredictArgs),
    /// Name the generator family of each image.
    Attribute(PredictArgs),
    /// Write per-pixel heatmaps from a sliding-window detector.
    Localize(LocalizeArgs),
    /// Penultimate-layer embeddings, PCA and a t-SNE map.
    Embed(EmbedArgs),
    /// Train on each setting of one axis and test against every setting.
    Sweep(SweepArgs),
    /// Accuracy and confusion matrix of a checkpoint on one split.
    Eval(EvalArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Detection,
    Attribution,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchKind {
    Mini,
    Full,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Patch,
    Jpeg,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of texture classes (2 to 6); the first is the authentic one.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub images_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest with the split field filled in.
    #[arg(long)]
    pub out: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.9,0.05,0.05")]
    pub fractions: String,
    /// Hold this class out entirely: it goes to test with a share of authentic images.
    #[arg(long)]
    pub hold_out: Option<String>,
    #[arg(long, default_value = "real")]
    pub real_label: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct FeatureArgs {
    /// Pixel-pair directions.
    #[arg(long, default_value = "hvda")]
    pub pairs: PairSubset,
    /// JPEG preprocessing: none, a quality, a comma list, or mixed.
    #[arg(long, default_value = "none")]
    pub jpeg: JpegPolicy,
    /// Random square crop of this size instead of the whole image.
    #[arg(long)]
    pub patch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long, required_unless_present = "images")]
    pub manifest: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "hvda")]
    pub pairs: PairSubset,
    #[arg(long, default_value = "none")]
    pub jpeg: JpegPolicy,
    /// Emit every sliding-window patch of this size rather than the whole image.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Window stride; defaults to the patch size.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    #[arg(long, value_enum, default_value_t = HeadKind::Detection)]
    pub head: HeadKind,
    #[arg(long, value_enum, default_value_t = ArchKind::Mini)]
    pub arch: ArchKind,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Defaults to 64 for detection and 10 per class for attribution.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub batches_per_epoch: usize,
    #[arg(long, default_value_t = 50)]
    pub val_batches: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Stop early once validation accuracy reaches this value.
    #[arg(long)]
    pub target_val_accuracy: Option<f64>,
    /// Label of authentic images; detection treats every other label as generated.
    #[arg(long, default_value = "real")]
    pub real_label: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, required_unless_present = "images")]
    pub manifest: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    /// Manifest split to score.
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
    /// Override the checkpoint's JPEG preprocessing.
    #[arg(long)]
    pub jpeg: Option<JpegPolicy>,
    /// Override the checkpoint's crop size.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// JSON results.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value_t = 128)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 8)]
    pub stride: usize,
    /// Directory for heatmaps; defaults to each image's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Images sampled per class.
    #[arg(long, default_value_t = 1000)]
    pub cap: usize,
    #[arg(long, default_value_t = 50)]
    pub pca_dim: usize,
    #[arg(long, default_value_t = 30.0)]
    pub perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub grid: GridKind,
    /// Axis values; defaults to 64,128,256 or 75,85,90,none.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON result.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "hvda")]
    pub pairs: PairSubset,
    #[command(flatten)]
    pub training: TrainingArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    #[arg(long)]
    pub jpeg: Option<JpegPolicy>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Cap on evaluated batches.
    #[arg(long, default_value_t = 2000)]
    pub test_batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
