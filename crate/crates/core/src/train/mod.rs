//! Training driver: per-iteration keep rate from the schedule, patch
//! sampling, forward/backward, optimizer step, metrics and checkpoints.

pub mod checkpoint;
pub mod flops;
pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::Checkpoint;
pub use flops::{estimate_flops, training_iteration_flops};
pub use optim::{lr_at, AdamW, AdamWConfig};

use crate::autodiff::Tape;
use crate::data::{batch_indices, BatchPlan, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::eval;
use crate::sampling::{self, KeepRate, SortSpec};
use crate::scalar::Scalar;
use crate::schedule::ScheduleSpec;
use crate::tensor::Tensor;
use crate::vit::{TokenBatch, ViT};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: BatchPlan,
    pub optim: AdamWConfig,
    /// Warmup length; `None` means 5% of all iterations.
    pub warmup_iters: Option<usize>,
    /// Learning rate at the end of the cosine decay.
    pub min_lr: f64,
    pub label_smoothing: f64,
    /// Kind and ρ range; iteration counts are filled in from the dataset.
    pub schedule: ScheduleSpec,
    pub sort: SortSpec,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// When false the sampling block is compiled out of the iteration
    /// entirely (every token is always used).
    pub sampling_block: bool,
    /// Evaluate validation accuracy at ρ = 1 after every epoch (otherwise
    /// only after the last one).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch: BatchPlan {
                batch_size: 64,
                seed: 0,
                drop_last: true,
            },
            optim: AdamWConfig::default(),
            warmup_iters: None,
            min_lr: 1e-5,
            label_smoothing: 0.0,
            schedule: ScheduleSpec::baseline(1, 1),
            sort: SortSpec::magnitude(),
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            sampling_block: true,
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.optim.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        for (key, b) in [("beta1", self.optim.beta1), ("beta2", self.optim.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        if self.min_lr < 0.0 || self.min_lr > self.optim.lr {
            return Err(Error::config("min_lr", "must lie in [0, lr]"));
        }
        Ok(())
    }

    /// The schedule with its iteration counts set for `n` training records.
    pub fn resolved_schedule(&self, n: usize) -> Result<ScheduleSpec> {
        let t = self.batch.batches_per_epoch(n);
        if t == 0 {
            return Err(Error::config("batch_size", format!("larger than the {n}-record training set")));
        }
        let spec = ScheduleSpec {
            iters_per_epoch: t,
            total_epochs: self.epochs,
            ..self.schedule.clone()
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub global_iter: usize,
    pub epoch: usize,
    pub rho: f64,
    pub k: usize,
    pub loss: f64,
    pub seconds: f64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub iters: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const METRICS_HEADER: &str = "iter,epoch,rho,k,loss,seconds,flops";

impl IterRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{}",
            self.global_iter, self.epoch, self.rho, self.k, self.loss, self.seconds, self.flops
        )
    }
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.iters {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }

    pub fn mean_flops(&self) -> f64 {
        self.iters.iter().map(|r| r.flops as f64).sum::<f64>() / self.iters.len().max(1) as f64
    }

    pub fn total_flops(&self) -> u64 {
        self.iters.iter().map(|r| r.flops).sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.iters.iter().map(|r| r.seconds).sum()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_accuracy)
    }

    /// Median iteration time among iterations run at keep rate `rho`.
    pub fn median_seconds_at(&self, rho: f64) -> Option<f64> {
        let mut t: Vec<f64> = self.iters.iter().filter(|r| r.rho == rho).map(|r| r.seconds).collect();
        eval::median(&mut t)
    }
}

/// One optimization step on a batch: returns `(loss, tokens kept)`.
///
/// `force_block` runs the gather path even at ρ = 1; `sampling_block =
/// false` bypasses sampling altogether.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    model: &mut ViT<T>,
    opt: &mut AdamW<T>,
    images: &Tensor<T>,
    labels: &[usize],
    rho: KeepRate,
    sort: SortSpec,
    iteration: u64,
    lr: f64,
    label_smoothing: f64,
    sampling_block: bool,
    force_block: bool,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let tokens = model.embed(&mut tape, images)?;
    let batch = if !sampling_block {
        let s = tape.shape(tokens);
        TokenBatch::full(tokens, s[0], s[1])
    } else if force_block {
        sampling::sample_forced(&mut tape, tokens, rho, sort, iteration)?
    } else {
        sampling::sample(&mut tape, tokens, rho.get(), sort, iteration)?
    };
    let k = batch.tokens_per_image();
    let logits = model.forward(&mut tape, &batch)?;
    let loss_var = tape.cross_entropy_smoothed(logits, labels, T::from_f64_lossy(label_smoothing))?;
    let loss = tape.value(loss_var).item()?.to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iter: iteration as usize,
            rho: rho.get(),
            loss,
        });
    }
    tape.backward_into(loss_var, &mut model.params)?;
    opt.step(&mut model.params, lr);
    Ok((loss, k))
}

/// Resumable training run.
pub struct Trainer<'d, T: Scalar> {
    pub model: ViT<T>,
    pub opt: AdamW<T>,
    pub cfg: TrainConfig,
    pub schedule: ScheduleSpec,
    pub metrics: RunMetrics,
    train: &'d Dataset,
    val: Option<&'d Dataset>,
    norm: Normalizer,
    iteration: usize,
    epoch_loss: (f64, usize),
    sink: Option<Box<dyn Write + 'd>>,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(model: ViT<T>, cfg: TrainConfig, train: &'d Dataset, val: Option<&'d Dataset>) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if train.channels() != mc.channels || train.image_size() != mc.image_size {
            return Err(Error::dim(
                "train",
                train.images.shape(),
                &[0, mc.channels, mc.image_size, mc.image_size],
            ));
        }
        if train.num_classes > mc.num_classes {
            return Err(Error::config("num_classes", "model has fewer classes than the dataset"));
        }
        let schedule = cfg.resolved_schedule(train.len())?;
        let opt = AdamW::new(cfg.optim, &model.params);
        Ok(Trainer {
            norm: Normalizer::from_dataset(train),
            model,
            opt,
            cfg,
            schedule,
            metrics: RunMetrics::default(),
            train,
            val,
            iteration: 0,
            epoch_loss: (0.0, 0),
            sink: None,
        })
    }

    /// Streams one CSV row per iteration to `w` (header written now).
    pub fn with_metrics_writer(mut self, mut w: impl Write + 'd) -> Result<Self> {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics", e))?;
        self.sink = Some(Box::new(w));
        Ok(self)
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn total_iters(&self) -> usize {
        self.schedule.total_iters()
    }

    fn warmup(&self) -> usize {
        self.cfg
            .warmup_iters
            .unwrap_or_else(|| (self.total_iters() as f64 * 0.05).round() as usize)
    }

    /// Runs iterations up to (excluding) `stop`, capped at the run length.
    pub fn run_to(&mut self, stop: usize) -> Result<()> {
        let stop = stop.min(self.total_iters());
        let t = self.schedule.iters_per_epoch;
        let mut epoch_batches: Option<(usize, Vec<Vec<usize>>)> = None;
        while self.iteration < stop {
            let it = self.iteration;
            let (epoch, j) = (it / t, it % t);
            if epoch_batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
                epoch_batches = Some((epoch, batch_indices(self.train.len(), &self.cfg.batch, epoch)));
            }
            let idx = &epoch_batches.as_ref().expect("set above").1[j];

            let start = Instant::now();
            let images: Tensor<T> = self.norm.apply(&self.train.gather(idx)?);
            let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
            let rho = self.schedule.rho_at(it)?;
            let lr = lr_at(it, self.total_iters(), self.warmup(), self.cfg.optim.lr, self.cfg.min_lr);
            let (loss, k) = train_step(
                &mut self.model,
                &mut self.opt,
                &images,
                &labels,
                rho,
                self.cfg.sort,
                it as u64,
                lr,
                self.cfg.label_smoothing,
                self.cfg.sampling_block,
                false,
            )?;
            let seconds = start.elapsed().as_secs_f64();

            let rec = IterRecord {
                global_iter: it,
                epoch,
                rho: rho.get(),
                k,
                loss,
                seconds,
                flops: training_iteration_flops(self.model.config(), k, labels.len()),
            };
            if let Some(w) = self.sink.as_mut() {
                writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io("metrics", e))?;
            }
            self.metrics.iters.push(rec);
            self.epoch_loss.0 += loss;
            self.epoch_loss.1 += 1;
            self.iteration += 1;

            if self.iteration.is_multiple_of(t) {
                self.end_epoch(epoch)?;
            }
            if self.cfg.checkpoint_every > 0 && self.iteration.is_multiple_of(self.cfg.checkpoint_every) {
                if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                    self.checkpoint().save(&dir.join(format!("ckpt_{:08}.pssc", self.iteration)))?;
                }
            }
        }
        if let Some(w) = self.sink.as_mut() {
            w.flush().map_err(|e| Error::io("metrics", e))?;
        }
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize) -> Result<()> {
        let last = epoch + 1 == self.schedule.total_epochs;
        let val_accuracy = match self.val {
            Some(val) if last || self.cfg.eval_every_epoch => Some(eval::evaluate(
                &self.model,
                val,
                &self.norm,
                KeepRate::FULL,
                SortSpec::magnitude(),
                self.cfg.batch.batch_size,
                1,
            )?),
            _ => None,
        };
        let (sum, n) = std::mem::replace(&mut self.epoch_loss, (0.0, 0));
        self.metrics.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / n.max(1) as f64,
            val_accuracy,
        });
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_to(self.total_iters())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model.params, Some(&self.opt), self.iteration as u64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores parameters, optimizer state and iteration from `ck`.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.iteration as usize > self.total_iters() {
            return Err(Error::Contract(format!(
                "checkpoint iteration {} beyond run length {}",
                ck.iteration,
                self.total_iters()
            )));
        }
        let mut params = self.model.params.clone();
        ck.restore_params(&mut params)?;
        let mut opt = self.opt.clone();
        ck.restore_optimizer(&params, &mut opt)?;
        self.model.params = params;
        self.opt = opt;
        self.iteration = ck.iteration as usize;
        self.epoch_loss = (0.0, 0);
        Ok(())
    }

    pub fn finish(self) -> (ViT<T>, RunMetrics) {
        (self.model, self.metrics)
    }
}

/// Runs a full training job.
pub fn train<T: Scalar>(train: &Dataset, val: Option<&Dataset>, model: ViT<T>, cfg: &TrainConfig) -> Result<(ViT<T>, RunMetrics)> {
    let mut t = Trainer::new(model, cfg.clone(), train, val)?;
    t.run()?;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        t.save_checkpoint(&dir.join("final.pssc"))?;
    }
    Ok(t.finish())
}
