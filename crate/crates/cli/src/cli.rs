use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mdb", version, about = "Difficulty-boosted deepfake detector training and dataset curation")]
pub struct Cli {
    /// Seed for every random choice (init, shuffling, splits).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML file of `flag-name = value` defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Run batch work on one thread.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the curation pipeline over a manifest.
    Curate(CurateArgs),
    /// Train and evaluate detectors.
    Train(TrainArgs),
    /// Compute AUC / EER / ACC from a score file.
    Eval(EvalArgs),
    /// Average high-pass spectra per group.
    Spectra(SpectraArgs),
    /// Serve the manual-review API.
    ServeReview(ServeArgs),
    /// Write the synthetic easy/hard mixture manifest.
    Mixture(MixtureArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct CurateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the surviving records are written.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON copy of the per-stage report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Comma-separated stages: prompt, detect, style, word, manual, crop.
    #[arg(long)]
    pub stages: Option<String>,
    /// Score sidecar(s) merged into record metadata first.
    #[arg(long = "scores")]
    pub scores: Vec<PathBuf>,
    /// Directory record paths are relative to (default: the manifest's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Where face crops go (default: `crops/` next to `--out`).
    #[arg(long)]
    pub crop_dir: Option<PathBuf>,
    #[arg(long)]
    pub prompt_threshold: Option<f64>,
    #[arg(long)]
    pub detect_threshold: Option<f64>,
    #[arg(long)]
    pub edge_threshold: Option<f64>,
    #[arg(long)]
    pub color_threshold: Option<f64>,
    /// Comma-separated exclusion words for the word stage.
    #[arg(long)]
    pub exclude_words: Option<String>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub min_face_px: Option<f64>,
    /// `components` or `pixel-fraction`.
    #[arg(long)]
    pub edge_metric: Option<String>,
    /// `per-channel` or `pooled`.
    #[arg(long)]
    pub variance_mode: Option<String>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// Training manifest(s); several are merged with source-prefixed ids.
    #[arg(long = "train", required = true)]
    pub train: Vec<PathBuf>,
    /// Test manifest(s), optionally named as `NAME=PATH`.
    #[arg(long = "test", required = true)]
    pub test: Vec<String>,
    /// vanilla, kd, dw, mdb, a comma list, or `all`.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Run the MDB scale-factor sweep instead (default grid 1,3,5,7,9,10).
    #[arg(long = "sweep-c", num_args = 0..=1, default_missing_value = "1,3,5,7,9,10")]
    pub sweep_c: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Teacher momentum m.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight cap C.
    #[arg(long = "cap-c")]
    pub cap_c: Option<f64>,
    #[arg(long)]
    pub kd_temperature: Option<f64>,
    #[arg(long)]
    pub kd_beta: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Hidden layer widths, comma-separated (empty for a linear model).
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub activation: Option<String>,
    /// Train only on these sources (comma-separated).
    #[arg(long)]
    pub train_sources: Option<String>,
    /// Evaluate only on these sources (comma-separated).
    #[arg(long)]
    pub test_sources: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Writes `report.json` and one epoch log per run here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct EvalArgs {
    /// JSONL (`{"id", "score", "label"?}`) or CSV/TSV (`id,score[,label]`).
    #[arg(long)]
    pub scores: PathBuf,
    /// Manifest supplying labels by id.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Print the full report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SpectraArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `source-label`, `source`, `label` or `all`.
    #[arg(long)]
    pub group_by: Option<String>,
    /// High-pass Gaussian sigma.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Decision log (default: `<manifest>.decisions.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Built UI bundle served at `/`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Assign 90/5/5 train/test/val splits per (source, label).
    #[arg(long)]
    pub split: bool,
}
