//! Training orchestration: the epoch loop, metric logging, checkpointing,
//! repeat-run averaging, and deterministic resume.
//!
//! Reproducibility contract: a (config, seed) pair fixes initialization,
//! every epoch's shuffle, every augmentation draw, and every dropout mask,
//! so the whole metric trajectory is bitwise reproducible (wall-clock times
//! aside) and a resumed run replays exactly what the uninterrupted run
//! would have done. Repeat run r uses seed + r.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{
    augment, batches, load_cifar, load_idx, streams, AugmentSpec, BatchPlan, CifarVariant,
    Dataset, Split,
};
use crate::error::{Error, Result};
use crate::layers::{softmax_xent, FeatureTensor, Network, NetworkConfig};
use crate::metrics::{MetricsRow, CSV_HEADER};
use crate::optim::{Adam, LrSchedule};

/// Where the training and test sets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        dir: PathBuf,
        variant: CifarVariant,
    },
    /// In-memory datasets, for synthetic tasks and tests.
    Memory { train: Dataset, test: Dataset },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Independent trainings averaged in the summary; run r seeds with seed+r.
    pub repeats: usize,
    pub augment: Option<AugmentSpec>,
    /// Keep only the first n training samples (loader order).
    pub train_limit: Option<usize>,
    pub source: DataSource,
    pub output_dir: PathBuf,
    /// Continue a single interrupted run from this checkpoint.
    pub resume_from: Option<PathBuf>,
    /// Print a one-line summary per epoch.
    pub verbose: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("training needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train limit of 0 leaves nothing to train on".into()));
        }
        if let Some(spec) = &self.augment {
            spec.validate()?;
        }
        if self.resume_from.is_some() && self.repeats != 1 {
            return Err(Error::Config(
                "resuming continues a single run; set repeats = 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run: u32,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub best_epoch: u32,
    pub final_train_loss: f64,
    /// Snapshot of the best epoch seen in this invocation; None only when a
    /// resumed run never beat the accuracy it inherited from its history.
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<RunSummary>,
    pub mean_final_test_acc: f64,
    pub mean_best_test_acc: f64,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

pub struct EvalReport {
    pub accuracy: f64,
    /// confusion[true_label][predicted_label]
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode pass over a full dataset: accuracy plus confusion counts.
pub fn evaluate(network: &Network, dataset: &Dataset) -> Result<EvalReport> {
    if !dataset.is_normalized() {
        return Err(Error::State("normalize the dataset before evaluation".into()));
    }
    if dataset.count() == 0 {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let config = network.config();
    let want = (config.input_height, config.input_width, config.input_channels);
    if dataset.shape() != want {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the network expects {:?}",
            dataset.shape(),
            want
        )));
    }
    if dataset.class_count() > config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the network only outputs {}",
            dataset.class_count(),
            config.classes
        )));
    }

    const EVAL_BATCH: usize = 256;
    let mut confusion = vec![vec![0usize; config.classes]; config.classes];
    let mut correct = 0usize;
    let mut start = 0;
    while start < dataset.count() {
        let end = (start + EVAL_BATCH).min(dataset.count());
        let images: Vec<FeatureTensor> = (start..end)
            .map(|i| dataset.image(i))
            .collect::<Result<_>>()?;
        let logits = network.forward_eval(&images)?;
        for (offset, row) in logits.iter().enumerate() {
            let truth = dataset.label(start + offset);
            let pred = argmax(row);
            confusion[truth][pred] += 1;
            if pred == truth {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / dataset.count() as f64,
        confusion,
        samples: dataset.count(),
    })
}

fn load_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, test) = match &config.source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        ),
        DataSource::Cifar { dir, variant } => (
            load_cifar(dir, *variant, Split::Train)?,
            load_cifar(dir, *variant, Split::Test)?,
        ),
        DataSource::Memory { train, test } => (train.clone(), test.clone()),
    };
    if let Some(limit) = config.train_limit {
        train.truncate(limit);
    }
    let train = if train.is_normalized() { train } else { train.normalize()? };
    let test = if test.is_normalized() { test } else { test.normalize()? };

    let want = (
        config.network.input_height,
        config.network.input_width,
        config.network.input_channels,
    );
    for (name, ds) in [("training", &train), ("test", &test)] {
        if ds.count() == 0 {
            return Err(Error::Data(format!("{name} set is empty")));
        }
        if ds.shape() != want {
            return Err(Error::Config(format!(
                "{name} images are {:?} but the network expects {:?}",
                ds.shape(),
                want
            )));
        }
        if ds.class_count() > config.network.classes {
            return Err(Error::Config(format!(
                "{name} set has {} classes but the network outputs {}",
                ds.class_count(),
                config.network.classes
            )));
        }
    }
    Ok((train, test))
}

/// Run the full protocol: `repeats` independent trainings (or one resumed
/// one), a shared metrics CSV, best/last checkpoints per run, and a JSON
/// summary with per-run and mean accuracies (both final-epoch and
/// best-epoch, since either average may be wanted).
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_ds, test_ds) = load_datasets(config)?;

    // Everything about a resume is checked before any output is written.
    let resume = match &config.resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != config.network {
                return Err(Error::Config(
                    "checkpoint architecture does not match the training config".into(),
                ));
            }
            if ckpt.epoch >= config.epochs {
                return Err(Error::Config(format!(
                    "checkpoint already covers {} epochs; nothing to resume for epochs = {}",
                    ckpt.epoch, config.epochs
                )));
            }
            Some(ckpt)
        }
        None => None,
    };

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| Error::io(&config.output_dir, e))?;
    let metrics_path = config.output_dir.join("metrics.csv");
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;

    let mut runs = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats as u32 {
        let run_seed = config.seed.wrapping_add(r as u64);
        let (mut net, mut adam, mut history, start_epoch) = match (&resume, r) {
            (Some(ckpt), 0) => {
                let (net, adam) = ckpt.restore()?;
                for row in &ckpt.history {
                    writeln!(csv, "{}", row.to_csv()).map_err(|e| Error::io(&metrics_path, e))?;
                }
                (net, adam, ckpt.history.clone(), ckpt.epoch)
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
                rng.set_stream(streams::INIT);
                let net = Network::init(config.network.clone(), &mut rng)?;
                let shapes: Vec<usize> = net.param_entries().iter().map(|(_, v)| v.len()).collect();
                (net, Adam::new(&shapes), Vec::new(), 0)
            }
        };
        let summary = run_one(
            r,
            run_seed,
            start_epoch,
            &mut net,
            &mut adam,
            &mut history,
            &mut csv,
            &metrics_path,
            &train_ds,
            &test_ds,
            config,
        )?;
        runs.push(summary);
    }
    csv.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let mean_final_test_acc =
        runs.iter().map(|s| s.final_test_acc).sum::<f64>() / runs.len() as f64;
    let mean_best_test_acc =
        runs.iter().map(|s| s.best_test_acc).sum::<f64>() / runs.len() as f64;
    let summary_path = config.output_dir.join("summary.json");
    let summary = serde_json::json!({
        "runs": runs,
        "mean_final_test_acc": mean_final_test_acc,
        "mean_best_test_acc": mean_best_test_acc,
    });
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::State(format!("summary encoding failed: {e}")))?;
    std::fs::write(&summary_path, text + "\n").map_err(|e| Error::io(&summary_path, e))?;

    Ok(TrainOutcome {
        runs,
        mean_final_test_acc,
        mean_best_test_acc,
        metrics_path,
        summary_path,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    run: u32,
    run_seed: u64,
    start_epoch: usize,
    net: &mut Network,
    adam: &mut Adam,
    history: &mut Vec<MetricsRow>,
    csv: &mut BufWriter<File>,
    metrics_path: &std::path::Path,
    train_ds: &Dataset,
    test_ds: &Dataset,
    config: &TrainConfig,
) -> Result<RunSummary> {
    // A resumed run inherits the accuracy bar its history already set.
    let mut best_acc = history
        .iter()
        .map(|r| r.test_acc)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut best_epoch = history
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.test_acc.partial_cmp(&b.test_acc).unwrap())
        .map(|(_, r)| r.epoch)
        .unwrap_or(0);
    let best_path = config.output_dir.join(format!("run{run}_best.ckpt"));
    let mut best_written = false;

    let n_batches = train_ds.count().div_ceil(config.batch_size);
    for epoch in start_epoch..config.epochs {
        let clock = Instant::now();
        let mut draws = ChaCha8Rng::seed_from_u64(run_seed);
        draws.set_stream(streams::draws(epoch));
        let plan = BatchPlan {
            batch_size: config.batch_size,
            seed: run_seed,
            epoch,
        };

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bi, mut batch) in batches(train_ds, &plan)?.enumerate() {
            // Per-sample draws happen in batch order, before any parallelism.
            let mut dropout_seeds = Vec::with_capacity(batch.images.len());
            for image in batch.images.iter_mut() {
                if let Some(spec) = &config.augment {
                    *image = augment(image, spec, &mut draws)?;
                }
                dropout_seeds.push(draws.random::<u64>());
            }

            let logits = net.forward_train(&batch.images, &dropout_seeds)?;
            let (loss, grad_logits) = softmax_xent(&logits, &batch.labels)?;
            if !loss.is_finite() {
                let max_param = net
                    .param_entries()
                    .iter()
                    .flat_map(|(_, v)| v.iter())
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    detail: format!("loss {loss}, max |parameter| {max_param:.3e}"),
                });
            }
            for (row, &label) in logits.iter().zip(&batch.labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();

            let grads = net.backward(&grad_logits)?;
            let lr = config
                .schedule
                .lr_at_progress(epoch as f64 + bi as f64 / n_batches.max(1) as f64);
            let gviews = grads.views();
            let mut entries = net.param_entries_mut();
            let mut pviews: Vec<&mut [f64]> = entries.iter_mut().map(|(_, s)| &mut **s).collect();
            adam.step(lr, &mut pviews, &gviews)?;
        }

        let report = evaluate(net, test_ds)?;
        let row = MetricsRow {
            run,
            epoch: epoch as u32,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc: report.accuracy,
            lr: config.schedule.lr_at_progress(epoch as f64),
            seconds: clock.elapsed().as_secs_f64(),
        };
        row.validate()?;
        writeln!(csv, "{}", row.to_csv()).map_err(|e| Error::io(metrics_path, e))?;
        csv.flush().map_err(|e| Error::io(metrics_path, e))?;
        history.push(row);
        if config.verbose {
            println!(
                "run {run} epoch {epoch}: loss {:.4} train_acc {:.4} test_acc {:.4} lr {:.5} ({:.1}s)",
                row.train_loss, row.train_acc, row.test_acc, row.lr, row.seconds
            );
        }

        if report.accuracy > best_acc {
            best_acc = report.accuracy;
            best_epoch = epoch as u32;
            Checkpoint::capture(net, adam, epoch + 1, history).save(&best_path)?;
            best_written = true;
        }
    }

    let last_path = config.output_dir.join(format!("run{run}_last.ckpt"));
    Checkpoint::capture(net, adam, config.epochs, history).save(&last_path)?;

    let final_row = history.last().expect("at least one epoch ran");
    Ok(RunSummary {
        run,
        final_test_acc: final_row.test_acc,
        best_test_acc: best_acc,
        best_epoch,
        final_train_loss: final_row.train_loss,
        best_checkpoint: best_written.then_some(best_path),
        last_checkpoint: last_path,
    })
}
