//! `aedm` — the damage-mapping workflow as one binary.
//!
//! Subcommands mirror the pipeline stages: `synth` (scene generation),
//! `rasterize` (annotations to mask), `chips` (dataset build and split),
//! `train`, `finetune`, `infer`, `eval`, and `report`. Every run writes a
//! `run_manifest.json` beside its outputs with resolved settings and
//! artifact checksums.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (missing or
//! malformed inputs), 3 numeric divergence during training.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use aedm_core::train::TrainError;

#[derive(Parser)]
#[command(
    name = "aedm",
    version,
    about = "Change-detection damage mapping: synthesize, train, infer, report",
    propagate_version = true
)]
struct Cli {
    /// Random seed for the subcommand (placement, shuffling, init).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// JSON config file; explicit flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for chip extraction and inference windows.
    /// The default single thread is fully deterministic; results are
    /// bit-identical at any setting.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one synthetic scene: pre.png, post.png, mask.png, labels.geojson
    Synth(SynthArgs),
    /// Burn a GeoJSON annotation file into a class mask aligned with a reference raster
    Rasterize(RasterizeArgs),
    /// Cut scenes into chips and write a train/val split manifest
    Chips(ChipsArgs),
    /// Train the two-stream change-detection model from scratch
    Train(TrainArgs),
    /// Continue training saved weights on a small markup set
    Finetune(FinetuneArgs),
    /// Tile a scene through the model and export damage instances
    Infer(InferArgs),
    /// Compare a predicted mask against a ground-truth mask
    Eval(EvalArgs),
    /// Estimate manual digitization effort versus pipeline wall time
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Domain preset: ventura_like (sparse) or santa_rosa_like (dense).
    #[arg(long, default_value = "ventura_like")]
    preset: String,
    /// Output directory for the scene artifacts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Intact building count [preset default if omitted].
    #[arg(long, value_name = "N")]
    n_intact: Option<usize>,
    /// Damaged building count [preset default if omitted].
    #[arg(long, value_name = "N")]
    n_damaged: Option<usize>,
    /// Scene width in pixels [preset default if omitted].
    #[arg(long, value_name = "PX")]
    width: Option<usize>,
    /// Scene height in pixels [preset default if omitted].
    #[arg(long, value_name = "PX")]
    height: Option<usize>,
    /// Scene name recorded in the artifacts [default: the preset name].
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct RasterizeArgs {
    /// GeoJSON FeatureCollection of building/damage polygons.
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Reference raster (with world file) supplying size and georeferencing.
    #[arg(long, value_name = "FILE")]
    like: PathBuf,
    /// Output directory for mask.png.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct ChipsArgs {
    /// Scene directory (pre.png, post.png, mask.png); repeatable.
    #[arg(long = "scene", value_name = "DIR", required = true)]
    scenes: Vec<PathBuf>,
    /// Output directory for chips.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Chip side length in pixels.
    #[arg(long, value_name = "PX")]
    chip_size: Option<usize>,
    /// Window stride in pixels (<= chip size).
    #[arg(long, value_name = "PX")]
    stride: Option<usize>,
    /// Minimum building-pixel fraction for a chip to be kept.
    #[arg(long, value_name = "FRAC")]
    min_foreground: Option<f64>,
    /// Fraction of chips held out for validation, by spatial block;
    /// 0 keeps everything in one training set (finetune markup).
    #[arg(long, value_name = "FRAC")]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Chip manifest (chips.jsonl) with train and val roles.
    #[arg(long, value_name = "FILE")]
    chips: PathBuf,
    /// Scene directory backing the manifest; repeatable.
    #[arg(long = "scene", value_name = "DIR", required = true)]
    scenes: Vec<PathBuf>,
    /// Output directory for weights.aedm and history.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    learning_rate: Option<f32>,
    /// Encoder depth (pooling steps).
    #[arg(long, value_name = "N")]
    depth: Option<usize>,
    /// Channels at the first encoder level (doubles per level).
    #[arg(long, value_name = "N")]
    base_channels: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Weights to start from (weights.aedm).
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    /// Chip manifest of the new-area markup (all roles are used).
    #[arg(long, value_name = "FILE")]
    chips: PathBuf,
    /// Scene directory backing the manifest; repeatable.
    #[arg(long = "scene", value_name = "DIR", required = true)]
    scenes: Vec<PathBuf>,
    /// Output directory for the adapted weights.aedm.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    learning_rate: Option<f32>,
    /// Keep encoder parameters fixed; adapt bottleneck, decoder, and head.
    #[arg(long)]
    freeze_encoders: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Trained weights (weights.aedm); architecture is read from the file.
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    /// Scene directory to map.
    #[arg(long, value_name = "DIR")]
    scene: PathBuf,
    /// Output directory for mask.png and instances.geojson.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Window side length in pixels.
    #[arg(long, value_name = "PX")]
    chip_size: Option<usize>,
    /// Window stride; overlapping windows average their logits.
    #[arg(long, value_name = "PX")]
    stride: Option<usize>,
    /// Drop connected components smaller than this many pixels.
    #[arg(long, value_name = "PX")]
    min_area: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted class mask (PNG).
    #[arg(long, value_name = "FILE")]
    pred: PathBuf,
    /// Ground-truth class mask (PNG).
    #[arg(long, value_name = "FILE")]
    truth: PathBuf,
    /// Output directory for metrics.json [default: current directory].
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Number of exported features (buildings).
    #[arg(long, value_name = "N")]
    features: u64,
    /// Manual digitization rate in seconds per feature.
    #[arg(long, value_name = "S", default_value_t = 30.0)]
    rate: f64,
    /// Measured pipeline wall time in seconds.
    #[arg(long, value_name = "S")]
    pipeline_seconds: f64,
    /// Output directory for effort_report.json [default: current directory].
    #[arg(long, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; everything
            // else is a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 3 for numeric divergence, 2 for every other runtime failure
/// (usage errors never reach here; clap maps those to 1).
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(TrainError::Diverged { .. }) = cause.downcast_ref::<TrainError>() {
            return 3;
        }
    }
    2
}
