//! `softlabel`: one binary for every pipeline stage.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 external detector failure.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use softlabel_core::Error;

#[derive(Parser, Debug)]
#[command(name = "softlabel", version, about = "Soft-label sub-typing pipeline for overhead imagery")]
struct Cli {
    /// Worker threads; 0 uses one per processor.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Plan a grid tour over a rectangular area.
    Plan(PlanArgs),
    /// Cut every labeled box out of its image.
    Crop(CropArgs),
    /// Split detections into two sub-types with a pixel heuristic.
    Subtype(SubtypeArgs),
    /// Build, subset and background-balance a dataset manifest.
    Curate(CurateArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Generate synthetic scenes with exact ground truth.
    Synth(SynthArgs),
    /// Simulate detector output from ground truth.
    MockDetect(MockDetectArgs),
    /// Run or resume the test-to-train loop.
    Cycle(CycleArgs),
    /// Summarize a dataset manifest.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Area as S,W,N,E in decimal degrees.
    #[arg(long, value_parser = parse_area, allow_hyphen_values = true)]
    area: [f64; 4],
    /// Ground sample distance in meters per pixel.
    #[arg(long, default_value_t = 0.3)]
    gsd: f64,
    /// Tile edge in pixels.
    #[arg(long, default_value_t = 416)]
    tile: u32,
    /// Tile height in pixels; defaults to --tile.
    #[arg(long)]
    tile_height: Option<u32>,
    /// Fraction of each tile shared with its neighbor.
    #[arg(long, default_value_t = 0.2)]
    overlap: f64,
    /// Tour file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CropArgs {
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of label files named after the images.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory for `<image>_<index>.png` crops.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum RuleKind {
    White,
    BlueRoof,
    Tank,
}

#[derive(Args, Debug)]
struct RuleArgs {
    /// Built-in heuristic.
    #[arg(long, value_enum, required_unless_present = "rule_file")]
    rule: Option<RuleKind>,
    /// JSON-Lines rule file; selects the record named by --rule-name.
    #[arg(long, conflicts_with = "rule", requires = "rule_name")]
    rule_file: Option<PathBuf>,
    /// Rule to use from --rule-file.
    #[arg(long)]
    rule_name: Option<String>,
    /// White rule: luma at or above which a pixel counts as white.
    #[arg(long, default_value_t = 200)]
    luma_threshold: u8,
    /// White rule: fraction of each crop edge ignored.
    #[arg(long, default_value_t = 0.2)]
    interior_margin: f64,
    /// White rule: share of white pixels needed for "white".
    #[arg(long, default_value_t = 0.5)]
    min_white_fraction: f64,
    /// Blue-roof rule: lower edge of the hue window in degrees.
    #[arg(long, default_value_t = 190.0)]
    hue_min: f64,
    /// Blue-roof rule: upper edge of the hue window in degrees.
    #[arg(long, default_value_t = 250.0)]
    hue_max: f64,
    /// Blue-roof rule: minimum saturation.
    #[arg(long, default_value_t = 0.25)]
    sat_min: f64,
    /// Blue-roof rule: minimum value.
    #[arg(long, default_value_t = 0.25)]
    val_min: f64,
    /// Blue-roof rule: share of blue pixels needed for "blue".
    #[arg(long, default_value_t = 0.5)]
    min_blue_fraction: f64,
    /// Tank rule: HSV value at or below which a pixel is shadow.
    #[arg(long, default_value_t = 0.25)]
    shadow_val_max: f64,
    /// Tank rule: interior disk radius as a fraction of half the shorter edge.
    #[arg(long, default_value_t = 0.8)]
    interior_radius_fraction: f64,
    /// Tank rule: exterior/interior shadow ratio needed for "full".
    #[arg(long, default_value_t = 1.3)]
    ratio_threshold: f64,
}

#[derive(Args, Debug)]
struct SubtypeArgs {
    #[command(flatten)]
    rule: RuleArgs,
    /// Directory of PNG images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of label files.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory for relabeled files and `classes.names`.
    #[arg(long)]
    out: PathBuf,
    /// Per-detection results as JSON Lines.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurateArgs {
    /// Existing manifest to start from.
    #[arg(long, conflicts_with_all = ["images", "labels"])]
    manifest: Option<PathBuf>,
    /// Build from this image directory instead.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    /// Label directory paired with --images; images without labels are background.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Split assigned to entries built from --images.
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    /// Comma-separated category names for a built manifest.
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
    /// Keep only these category ids, renumbered in the given order.
    #[arg(long, value_delimiter = ',', requires = "labels_out")]
    keep: Vec<u32>,
    /// Where remapped label files go (with --keep).
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// Subsample background to this share of the result.
    #[arg(long)]
    background_fraction: Option<f64>,
    /// Seed for background subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output manifest.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction label files (with confidences).
    #[arg(long)]
    preds: PathBuf,
    /// Ground-truth label files.
    #[arg(long)]
    gts: PathBuf,
    /// IoU threshold for matching.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Report file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Precision/recall/F1 curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Also report how many predictions reach this confidence.
    #[arg(long)]
    count_at: Option<f64>,
    /// Reference count for --count-at; defaults to the ground-truth count.
    #[arg(long, requires = "count_at")]
    reference: Option<i64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum KindArg {
    Car,
    Roof,
    Tank,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene spec as a JSON-Lines record; replaces the scene flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Object kind.
    #[arg(long, value_enum, default_value_t = KindArg::Car)]
    kind: KindArg,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    /// Fewest objects per scene.
    #[arg(long, default_value_t = 5)]
    min_objects: u32,
    /// Most objects per scene.
    #[arg(long, default_value_t = 20)]
    max_objects: u32,
    /// Scene width in pixels.
    #[arg(long, default_value_t = 416)]
    width: u32,
    /// Scene height in pixels.
    #[arg(long, default_value_t = 416)]
    height: u32,
    /// Background gray level.
    #[arg(long, default_value_t = 110)]
    background_gray: u8,
    /// Uniform per-pixel gray noise amplitude.
    #[arg(long, default_value_t = 6)]
    pixel_noise: u8,
    /// Image id prefix.
    #[arg(long, default_value = "scene_")]
    prefix: String,
    /// Base seed; overrides the config seed when given.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (images/, labels/, intents.jsonl, manifest.jsonl).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    /// Noise model as a JSON-Lines record; replaces the noise flags below.
    #[arg(long)]
    noise_config: Option<PathBuf>,
    /// Probability of missing each object.
    #[arg(long, default_value_t = 0.0)]
    fn_rate: f64,
    /// Expected spurious boxes per image.
    #[arg(long, default_value_t = 0.0)]
    fp_rate: f64,
    /// Box-corner jitter standard deviation in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Lowest true-positive confidence.
    #[arg(long, default_value_t = 1.0)]
    tp_conf_min: f64,
    /// Lowest false-positive confidence.
    #[arg(long, default_value_t = 0.05)]
    fp_conf_min: f64,
    /// Highest false-positive confidence.
    #[arg(long, default_value_t = 0.6)]
    fp_conf_max: f64,
    /// Noise seed; overrides the config seed when given.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MockDetectArgs {
    /// Ground-truth label directory.
    #[arg(long)]
    truth: PathBuf,
    /// Images to "detect" on; defaults to every truth file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Output directory for predictions.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args, Debug)]
struct CycleArgs {
    /// Cycle config as a JSON-Lines record, optionally with a `detector` object.
    #[arg(long)]
    config: PathBuf,
    /// State directory.
    #[arg(long)]
    state: PathBuf,
    /// Use the built-in mock detector on this truth directory.
    #[arg(long)]
    mock_truth: Option<PathBuf>,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Manifest to summarize.
    #[arg(long)]
    manifest: PathBuf,
}

/// Bad command-line input detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_area(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected S,W,N,E, got {s:?}"));
    }
    let mut out = [0.0; 4];
    for (slot, p) in out.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| format!("{p:?} is not a number"))?;
    }
    Ok(out)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Detector { .. }) => 3,
        Some(Error::InvalidArea(_) | Error::InvalidTileSpec(_) | Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        eprintln!("softlabel: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("softlabel: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
