//! Command-line interface: `train`, `eval`, `filters`, `decompose`.
//!
//! Training is configured by a TOML file with flat keys; any flag repeated
//! on the command line overrides the file. Exit codes by failure class:
//! 1 for invalid configuration or parameters, 2 for data/IO problems,
//! 3 for numeric divergence during training.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::checkpoint::Checkpoint;
use crate::data::{load_idx, load_idx_images, AugmentSpec, CifarVariant};
use crate::error::{Error, Result};
use crate::filters::{check_qmf, make_filters, WaveletParams};
use crate::layers::{Network, NetworkConfig};
use crate::optim::LrSchedule;
use crate::trainer::{self, DataSource, TrainConfig};
use crate::transform::Plane;

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            // Help and version requests are not failures.
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                0
            } else {
                eprint!("{e}");
                1
            };
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Filters(args) => cmd_filters(args),
        Command::Decompose(args) => cmd_decompose(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Parser)]
#[command(name = "wavenn", version, about = "Train and inspect networks built on learnable wavelet filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a TOML config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on an IDX image/label pair
    Eval(EvalArgs),
    /// Print the filter pair and orthonormality residuals for one (alpha, beta)
    Filters(FilterArgs),
    /// Export one image's per-path subband decompositions as PGM files
    Decompose(DecomposeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file (flat keys; flags below override it)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Use only the first n training samples
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    lr_initial: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Continue a single interrupted run from this checkpoint
    #[arg(long)]
    resume_from: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDX image file
    #[arg(long)]
    images: PathBuf,
    /// IDX label file
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    beta: f64,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDX image file
    #[arg(long)]
    images: PathBuf,
    /// Which image to decompose
    #[arg(long)]
    index: usize,
    /// Output directory for the PGM files (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DataFormat {
    Idx,
    Cifar10,
    Cifar100,
}

/// The training config file. Flat keys; everything except the data source
/// and epoch count has a default.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    format: DataFormat,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    /// Directory holding the CIFAR binary batches.
    data_dir: Option<PathBuf>,
    output_dir: PathBuf,

    #[serde(default = "d_paths")]
    paths: usize,
    #[serde(default = "d_levels")]
    levels: usize,
    #[serde(default = "d_fc_widths")]
    fc_widths: Vec<usize>,
    #[serde(default = "d_classes")]
    classes: usize,
    #[serde(default = "d_input_height")]
    input_height: usize,
    #[serde(default = "d_input_width")]
    input_width: usize,
    #[serde(default = "d_input_channels")]
    input_channels: usize,
    #[serde(default = "d_dropout_keep")]
    dropout_keep: f64,

    epochs: usize,
    #[serde(default = "d_batch_size")]
    batch_size: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "d_repeats")]
    repeats: usize,
    train_limit: Option<usize>,
    #[serde(default = "d_lr_initial")]
    lr_initial: f64,
    #[serde(default = "d_lr_decay")]
    lr_decay: f64,
    #[serde(default = "d_lr_staircase")]
    lr_staircase: bool,

    #[serde(default)]
    augment_max_shift: usize,
    #[serde(default)]
    augment_max_rotate_deg: f64,
    #[serde(default)]
    augment_invert_prob: f64,
}

fn d_paths() -> usize {
    8
}
fn d_levels() -> usize {
    3
}
fn d_fc_widths() -> Vec<usize> {
    vec![32, 32]
}
fn d_classes() -> usize {
    10
}
fn d_input_height() -> usize {
    28
}
fn d_input_width() -> usize {
    28
}
fn d_input_channels() -> usize {
    1
}
fn d_dropout_keep() -> f64 {
    0.8
}
fn d_batch_size() -> usize {
    128
}
fn d_repeats() -> usize {
    1
}
fn d_lr_initial() -> f64 {
    0.01
}
fn d_lr_decay() -> f64 {
    0.95
}
fn d_lr_staircase() -> bool {
    true
}

impl ConfigFile {
    fn source(&self) -> Result<DataSource> {
        match self.format {
            DataFormat::Idx => {
                let need = |field: &Option<PathBuf>, key: &str| {
                    field.clone().ok_or_else(|| {
                        Error::Config(format!("format = \"idx\" requires the '{key}' key"))
                    })
                };
                Ok(DataSource::Idx {
                    train_images: need(&self.train_images, "train_images")?,
                    train_labels: need(&self.train_labels, "train_labels")?,
                    test_images: need(&self.test_images, "test_images")?,
                    test_labels: need(&self.test_labels, "test_labels")?,
                })
            }
            DataFormat::Cifar10 | DataFormat::Cifar100 => {
                let dir = self.data_dir.clone().ok_or_else(|| {
                    Error::Config("CIFAR formats require the 'data_dir' key".into())
                })?;
                let variant = if self.format == DataFormat::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                Ok(DataSource::Cifar { dir, variant })
            }
        }
    }

    fn into_train_config(mut self, args: &TrainArgs) -> Result<TrainConfig> {
        if let Some(v) = args.epochs {
            self.epochs = v;
        }
        if let Some(v) = args.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = args.seed {
            self.seed = v;
        }
        if let Some(v) = args.paths {
            self.paths = v;
        }
        if let Some(v) = args.repeats {
            self.repeats = v;
        }
        if let Some(v) = &args.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = args.train_limit {
            self.train_limit = Some(v);
        }
        if let Some(v) = args.lr_initial {
            self.lr_initial = v;
        }
        if let Some(v) = args.lr_decay {
            self.lr_decay = v;
        }

        let augment = AugmentSpec {
            max_shift: self.augment_max_shift,
            max_rotate_deg: self.augment_max_rotate_deg,
            invert_prob: self.augment_invert_prob,
        };
        let source = self.source()?;
        let config = TrainConfig {
            network: NetworkConfig {
                paths: self.paths,
                levels: self.levels,
                fc_widths: self.fc_widths,
                classes: self.classes,
                input_height: self.input_height,
                input_width: self.input_width,
                input_channels: self.input_channels,
                dropout_keep: self.dropout_keep,
            },
            schedule: LrSchedule {
                initial: self.lr_initial,
                decay_rate: self.lr_decay,
                staircase: self.lr_staircase,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            repeats: self.repeats,
            augment: if augment.is_identity() { None } else { Some(augment) },
            train_limit: self.train_limit,
            source,
            output_dir: self.output_dir,
            resume_from: args.resume_from.clone(),
            verbose: true,
        };
        config.validate()?;
        Ok(config)
    }
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    // A config that can't be read is a configuration error (exit 1), not an
    // IO error: nothing has started yet and the message should name the file.
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = read_config(&args.config)?.into_train_config(&args)?;
    let outcome = trainer::train(&config)?;
    println!(
        "mean final test accuracy {:.6} over {} run(s)",
        outcome.mean_final_test_acc,
        outcome.runs.len()
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("summary: {}", outcome.summary_path.display());
    Ok(())
}

fn load_network(path: &Path) -> Result<Network> {
    let (network, _) = Checkpoint::load(path)?.restore()?;
    Ok(network)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let network = load_network(&args.checkpoint)?;
    let dataset = load_idx(&args.images, &args.labels)?.normalize()?;
    let report = trainer::evaluate(&network, &dataset)?;
    println!(
        "accuracy={:.6} error_pct={:.2}",
        report.accuracy,
        100.0 * (1.0 - report.accuracy)
    );
    Ok(())
}

fn cmd_filters(args: FilterArgs) -> Result<()> {
    let pair = make_filters(WaveletParams::new(args.alpha, args.beta)?)?;
    let fmt = |taps: &[f64; 6]| {
        taps.iter()
            .map(|t| format!("{t:.12}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("h  = [{}]", fmt(&pair.lowpass));
    println!("h1 = [{}]", fmt(&pair.highpass));
    let report = check_qmf(&pair.lowpass, 1e-10);
    println!("sum residual    = {:e}", report.sum_residual);
    println!("norm residual   = {:e}", report.norm_residual);
    println!("shift-2 residual = {:e}", report.shift2_residual);
    println!("orthonormal within 1e-10: {}", if report.pass { "yes" } else { "no" });
    Ok(())
}

/// Min–max scale a coefficient plane to 8-bit gray; a constant plane maps
/// to mid-gray instead of dividing by zero.
fn plane_to_gray(plane: &Plane) -> Vec<u8> {
    let min = plane.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = plane.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return vec![128; plane.data().len()];
    }
    plane
        .data()
        .iter()
        .map(|v| ((v - min) / (max - min) * 255.0).round() as u8)
        .collect()
}

fn write_pgm(path: &Path, plane: &Plane) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", plane.width(), plane.height()).into_bytes();
    bytes.extend(plane_to_gray(plane));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const BAND_LETTERS: [char; 4] = ['A', 'H', 'V', 'D'];

fn cmd_decompose(args: DecomposeArgs) -> Result<()> {
    let network = load_network(&args.checkpoint)?;
    let dataset = load_idx_images(&args.images)?.normalize()?;
    if args.index >= dataset.count() {
        return Err(Error::InvalidParameter(format!(
            "image index {} out of range for {} images",
            args.index,
            dataset.count()
        )));
    }
    let image = dataset.image(args.index)?;
    let stacks = network.decompose_image(&image)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut written = 0usize;
    for (p, levels) in stacks.iter().enumerate() {
        for (l, tensor) in levels.iter().enumerate() {
            // Channel 4*parent + band holds one subband of one level-(l-1)
            // channel, so the filename carries (band letter, parent index).
            for ch in 0..tensor.channels() {
                let name = format!(
                    "path{p}_level{}_{}_ch{}.pgm",
                    l + 1,
                    BAND_LETTERS[ch % 4],
                    ch / 4
                );
                write_pgm(&args.out.join(name), &tensor.channel(ch))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} subband images to {}", args.out.display());
    Ok(())
}
