use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fmt_sig, AdamState, LrSchedule, TrainConfig};
use crate::data::{bicubic_upsample, clip_unit, psnr, Dataset, ImagePair, PatchDataset};
use crate::error::{Error, Result};
use crate::harness::adam_step;
use crate::model::{save_checkpoint, Generator};
use crate::sensitivity::{BackwardOptions, DivergenceWatchdog, WatchdogSummary};
use crate::tensor::Scalar;

pub const METRICS_FILE: &str = "metrics.csv";
pub const GRAD_REPORTS_FILE: &str = "grad_reports.jsonl";
pub const BEST_CHECKPOINT: &str = "ckpt_best.bin";
pub const LAST_CHECKPOINT: &str = "ckpt_last.bin";

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NfeStats {
    pub mean: f64,
    pub std: f64,
    pub calls: usize,
}

impl NfeStats {
    pub fn from_counts(counts: &[usize]) -> Option<Self> {
        if counts.is_empty() {
            return None;
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            calls: counts.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageEval {
    pub id: String,
    pub psnr: f64,
    /// Solver evaluations and accepted steps; absent for the RRDB core.
    pub nfe: Option<usize>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationStats {
    pub psnr_mean: f64,
    pub nfe: Option<NfeStats>,
    pub images: Vec<ImageEval>,
}

/// Super-resolve every image (one model call each) and score it against its HR.
///
/// Outputs are clipped to `[0, 1]` before scoring.
pub fn validate<T: Scalar>(generator: &Generator<T>, images: &[ImagePair<T>]) -> Result<ValidationStats> {
    if images.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let mut evals = Vec::with_capacity(images.len());
    for img in images {
        let (sr, meta) = generator.forward(&img.lr)?;
        let sr = clip_unit(&sr);
        evals.push(ImageEval {
            id: img.id.clone(),
            psnr: psnr(&sr, &img.hr, 1.0)?,
            nfe: meta.nfe(),
            steps: meta.solve.as_ref().map(|s| s.accepted()),
        });
    }
    let counts: Vec<usize> = evals.iter().filter_map(|e| e.nfe).collect();
    Ok(ValidationStats {
        psnr_mean: evals.iter().map(|e| e.psnr).sum::<f64>() / evals.len() as f64,
        nfe: NfeStats::from_counts(&counts),
        images: evals,
    })
}

/// Mean PSNR of bicubic upsampling of each LR image.
pub fn bicubic_baseline<T: Scalar>(images: &[ImagePair<T>], scale: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::config("baseline needs at least one image"));
    }
    let mut total = 0.0;
    for img in images {
        total += psnr(&bicubic_upsample(&img.lr, scale)?, &img.hr, 1.0)?;
    }
    Ok(total / images.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_nfe: Option<NfeStats>,
    pub skipped_batches: usize,
    pub val: ValidationStats,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub generator: Generator<T>,
    pub epochs: Vec<EpochMetrics>,
    pub baseline_psnr: f64,
    pub best_psnr: f64,
    pub watchdog: WatchdogSummary,
    pub out_dir: PathBuf,
}

struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        inner
            .write_record(["epoch", "split", "psnr", "nfe_mean", "nfe_std", "lr"])
            .map_err(|e| csv_error(path, e))?;
        Ok(Self { inner })
    }

    fn row(&mut self, epoch: usize, split: &str, psnr: Option<f64>, nfe: Option<NfeStats>, lr: f64) -> Result<()> {
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        self.inner
            .write_record([
                epoch.to_string(),
                split.to_string(),
                opt(psnr),
                opt(nfe.map(|s| s.mean)),
                opt(nfe.map(|s| s.std)),
                fmt_sig(lr),
            ])
            .and_then(|_| self.inner.flush().map_err(Into::into))
            .map_err(|e| Error::State(format!("metrics write failed: {e}")))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::State(format!("{}: {other:?}", path.display())),
    }
}

/// Train a generator, writing metrics, gradient reports and checkpoints to `out_dir`.
///
/// Each epoch draws fresh random crops, takes one Adam step per batch and
/// validates on the held-out images. Batches whose adjoint solve diverged
/// are logged and skipped without touching the optimizer.
pub fn train<T: Scalar>(config: &TrainConfig, data: &Dataset<T>, out_dir: &Path) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if data.val.is_empty() {
        return Err(Error::config("dataset has no validation images"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut generator = Generator::<T>::new(config.generator.clone(), &mut rng)?;
    let patches = PatchDataset::new(
        &data.train,
        config.patch_size,
        config.patches_per_image,
        config.augment,
        config.seed.wrapping_add(1),
    )?;
    let baseline_psnr = bicubic_baseline(&data.val, config.generator.scale)?;
    log::info!(
        "training {} parameters on {} crops per epoch, bicubic baseline {baseline_psnr:.3} dB",
        generator.num_params(),
        patches.len()
    );

    let mut metrics = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let reports_path = out_dir.join(GRAD_REPORTS_FILE);
    let mut reports = BufWriter::new(File::create(&reports_path).map_err(|e| Error::io(&reports_path, e))?);
    let mut adam = AdamState::new(&generator.params());
    let mut schedule = LrSchedule::new(config);
    let mut watchdog = DivergenceWatchdog::new(config.watchdog_multiple, config.backward_budget);
    let opts = BackwardOptions {
        budget: config.backward_budget,
        ..BackwardOptions::default()
    };
    let method = config.generator.backend;
    let mut epochs = Vec::new();
    let mut batch_index = 0usize;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr = schedule.lr;
        let mut losses = Vec::new();
        let mut nfes = Vec::new();
        let mut skipped = 0usize;
        for batch in patches.batches(epoch, config.batch_size)? {
            let step = generator.loss_and_grad(&batch.lr, &batch.hr, config.loss, method, &opts)?;
            losses.push(step.loss);
            nfes.extend(step.meta.nfe());
            if let Some(report) = &step.report {
                let mut rec = report.record();
                rec.batch = Some(batch_index);
                rec.epoch = Some(epoch);
                let line = serde_json::to_string(&rec)?;
                writeln!(reports, "{line}").map_err(|e| Error::io(&reports_path, e))?;
                if let Some(flag) = watchdog.observe_record(batch_index, &rec) {
                    log::warn!("batch {batch_index}: backward solve flagged ({:?})", flag.reason);
                }
            }
            batch_index += 1;
            match step.gradients {
                Some(grads) => {
                    if !adam_step(&mut generator.params_mut(), &grads, &mut adam, lr)? {
                        skipped += 1;
                    }
                }
                None => {
                    log::warn!("epoch {epoch}: skipping diverged batch");
                    skipped += 1;
                }
            }
        }
        reports.flush().map_err(|e| Error::io(&reports_path, e))?;

        let val = validate(&generator, &data.val)?;
        let train_nfe = NfeStats::from_counts(&nfes);
        metrics.row(epoch, "train", None, train_nfe, lr)?;
        metrics.row(epoch, "val", Some(val.psnr_mean), val.nfe, lr)?;
        if schedule.improved(val.psnr_mean) {
            save_checkpoint(&generator, &out_dir.join(BEST_CHECKPOINT))?;
        }
        save_checkpoint(&generator, &out_dir.join(LAST_CHECKPOINT))?;
        let stop = schedule.observe(val.psnr_mean);
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            train_nfe,
            skipped_batches: skipped,
            val,
            wall_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val {:.3} dB lr {lr:.2e} ({:.1}s)",
            m.train_loss,
            m.val.psnr_mean,
            m.wall_s
        );
        epochs.push(m);
        if stop {
            log::info!("learning rate reached its floor, stopping");
            break;
        }
    }

    Ok(TrainOutcome {
        generator,
        best_psnr: schedule.best.unwrap_or(f64::NEG_INFINITY),
        epochs,
        baseline_psnr,
        watchdog: watchdog.summary(),
        out_dir: out_dir.to_path_buf(),
    })
}
