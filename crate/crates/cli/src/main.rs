mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deepguard::dataset::{Label, Split, SplitLevel};
use deepguard::ErrorKind;

#[derive(Debug, Parser)]
#[command(
    name = "deepguard",
    version,
    about = "Deepfake face detection: dataset preparation, curriculum training, evaluation and GradCAM attribution"
)]
struct Cli {
    /// Pin numeric kernels to one thread so repeated runs are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Log filter (error, warn, info, debug, trace). RUST_LOG takes precedence.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample frames from videos and save 224x224 face crops plus eye landmarks.
    Extract(ExtractArgs),
    /// Split a crop directory into train/val/test and write a manifest.
    Manifest(ManifestArgs),
    /// Subsample the train split to an equal number of samples per class.
    Balance(BalanceArgs),
    /// Write eye-masked copies of the train split and a manifest pointing at them.
    MaskEyes(MaskEyesArgs),
    /// Run the configured training curriculum.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Train and evaluate one model per row of an ablation grid.
    Ablate(AblateArgs),
    /// Compute GradCAM heat maps for one image or a whole split.
    Gradcam(GradcamArgs),
    /// Write a checkpoint's parameters and graph description for inference elsewhere.
    Export(ExportArgs),
    /// Train one curriculum per fake-class loss weight and report the best.
    SweepW(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DetectorKind {
    /// Largest skin-tone region.
    Skin,
    /// The centered square of the frame; for pre-cropped footage.
    Center,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Directory with `real/` and `fake/` subdirectories of videos.
    #[arg(long, conflicts_with = "video", required_unless_present = "video")]
    videos: Option<PathBuf>,

    /// A single video; repeatable. Needs --label.
    #[arg(long, requires = "label")]
    video: Vec<PathBuf>,

    /// Class of every --video.
    #[arg(long)]
    label: Option<Label>,

    /// Sampling rate in frames per second.
    #[arg(long, default_value_t = 1.0)]
    rate: f64,

    #[arg(long, value_enum, default_value_t = DetectorKind::Skin)]
    detector: DetectorKind,

    /// Crop root; defaults to `$DEEPGUARD_CACHE/crops`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ManifestArgs {
    /// Crop root laid out as `<label>/<video>/t<ms>.png`.
    #[arg(long)]
    crops: PathBuf,

    /// Output CSV; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,

    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
    ratios: Vec<f64>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long, default_value = "video")]
    split_level: SplitLevel,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    #[arg(long)]
    manifest: PathBuf,

    #[arg(long)]
    out: PathBuf,

    /// Train samples kept per class; defaults to the minority class count.
    #[arg(long)]
    per_class: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct MaskEyesArgs {
    #[arg(long)]
    manifest: PathBuf,

    /// Output manifest CSV for the masked variant.
    #[arg(long)]
    out: PathBuf,

    /// Where masked images go; defaults to `$DEEPGUARD_CACHE/masked_eye`.
    #[arg(long)]
    images_dir: Option<PathBuf>,

    /// Eye landmark CSV; defaults to `landmarks.csv` in the crop root of the
    /// first train sample. Samples without landmarks get the fixed band.
    #[arg(long)]
    landmarks: Option<PathBuf>,

    /// Ignore landmarks and mask the fixed band on every image.
    #[arg(long)]
    fixed_band: bool,

    #[arg(long, default_value_t = 4)]
    margin_px: u32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,

    /// Output directory; overrides `data.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Continue from a `*.last.safetensors` checkpoint of an interrupted run.
    #[arg(long)]
    resume: Option<PathBuf>,

    /// Replace results of an earlier run in the output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    #[arg(long)]
    manifest: PathBuf,

    #[arg(long, default_value = "test")]
    split: Split,

    /// A sample is called fake when p(fake) >= threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,

    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,

    /// One technique set per line, e.g. `WL + NA`; defaults to the standard ten rows.
    #[arg(long)]
    grid: Option<PathBuf>,

    /// Output directory; defaults to `<data.output_dir>/ablation`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// A 224x224 crop. Conflicts with --manifest.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    image: Option<PathBuf>,

    /// Heat map PNG for --image.
    #[arg(long, requires = "image")]
    out: Option<PathBuf>,

    /// Blended image PNG for --image.
    #[arg(long, requires = "image")]
    overlay: Option<PathBuf>,

    #[arg(long, default_value_t = 0.4)]
    alpha: f32,

    /// Target layer; defaults to the deepest trunk stage.
    #[arg(long)]
    layer: Option<String>,

    /// Class to explain; defaults to the predicted class.
    #[arg(long = "class")]
    target_class: Option<Label>,

    /// Batch mode: every sample of --split in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,

    #[arg(long, default_value = "test", requires = "manifest")]
    split: Split,

    /// Batch mode: per-sample eye-region heat mass CSV.
    #[arg(long, requires = "manifest")]
    csv: Option<PathBuf>,

    /// Batch mode: also write every heat map here.
    #[arg(long, requires = "manifest")]
    maps_dir: Option<PathBuf>,

    /// Batch mode: eye landmark CSV used to place the eye boxes.
    #[arg(long, requires = "manifest")]
    landmarks: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,

    /// Directory receiving `model.safetensors` and `graph.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,

    /// Comma-separated fake-class weights, e.g. `1.0,1.85,3.0`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,

    /// Output directory; defaults to `<data.output_dir>/sweep`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<deepguard::Error>().map(deepguard::Error::kind) {
        Some(ErrorKind::Validation) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Integrity) => 4,
        Some(ErrorKind::Other) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        // must happen before the first kernel spins up a thread pool
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
