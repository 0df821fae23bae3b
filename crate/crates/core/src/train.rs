//! Training loop, evaluation and the ablation grid.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{BatchOptions, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{loss, LossConfig};
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::model::{argmax_channels, count_flops, BlockCounts, LemmaConfig, LemmaModel};
use crate::optim::AdamState;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: LemmaConfig,
    pub loss: LossConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate every this many epochs (and after the last one).
    pub eval_every: usize,
    /// Stop after this many optimizer steps in total, saving `last_checkpoint`.
    pub max_steps: Option<u64>,
    pub hflip: bool,
    /// JSON-lines log, one record per epoch.
    pub log_path: Option<PathBuf>,
    /// Written whenever validation mIoU improves.
    pub best_checkpoint: Option<PathBuf>,
    /// Written at the end of training or on interruption.
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(model: LemmaConfig, loss: LossConfig) -> Self {
        TrainConfig {
            model,
            loss,
            lr: 1e-3,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            eval_every: 1,
            max_steps: None,
            hflip: false,
            log_path: None,
            best_checkpoint: None,
            last_checkpoint: None,
        }
    }

    pub fn validate(&self, nc: usize) -> Result<()> {
        self.model.validate()?;
        self.loss.validate(self.model.nc)?;
        if self.model.nc != nc {
            return Err(Error::Config(format!("model has {} classes, dataset has {nc}", self.model.nc)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch size and eval interval must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub val_pixel_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step taken.
    pub model: LemmaModel,
    /// Parameters with the best validation mIoU seen in this run.
    pub best_model: Option<LemmaModel>,
    pub best_val_miou: Option<f64>,
    pub log: Vec<EpochRecord>,
    pub step: u64,
    /// Stopped early by `max_steps`.
    pub interrupted: bool,
    /// Full state for resuming.
    pub last: Checkpoint,
}

/// Shuffle seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One forward/backward/update on a batch; returns the batch loss.
fn train_step(
    model: &mut LemmaModel,
    adam: &mut AdamState,
    images: crate::tensor::Tensor,
    masks: &crate::labels::LabelMap,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let rec = model.record(&mut tape, x, true)?;
    let l = loss(&mut tape, rec.trace.m_final, masks, cfg)?;
    let value = tape.value(l).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    tape.backward(l)?;
    for ((_, t), v) in model.params.iter_mut().zip(&rec.params) {
        t.grad = tape.take_grad(*v);
    }
    adam.step(&mut model.params)?;
    Ok(value)
}

/// Train from scratch (`resume = None`) or continue a checkpoint. Fully
/// determined by the config and seed, so an interrupted run resumed from
/// its last checkpoint ends in the same state as an uninterrupted one.
pub fn train(data: &Dataset, cfg: &TrainConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate(data.num_classes())?;
    let fresh = resume.is_none();
    let mut state = match resume {
        Some(c) => {
            if c.model.config != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint config {:?} differs from requested {:?}",
                    c.model.config, cfg.model
                )));
            }
            c
        }
        None => Checkpoint::from_model(LemmaModel::build(cfg.model, cfg.seed)?),
    };
    let mut adam = state.adam.take().unwrap_or_else(|| AdamState::new(cfg.lr, &state.model.params));
    adam.lr = cfg.lr;

    let opts = BatchOptions { hflip: cfg.hflip, ..BatchOptions::default() };
    let per_epoch = data.batches(Split::Train, cfg.batch_size, 0)?.num_batches() as u64;
    let has_val = !data.split_indices(Split::Val).is_empty();
    let mut log_file = match &cfg.log_path {
        Some(p) => Some(OpenOptions::new().create(true).write(true).append(!fresh).truncate(fresh).open(p)?),
        None => None,
    };

    let mut model = state.model;
    let mut step = state.step;
    let mut epoch_loss_sum = state.epoch_loss_sum;
    let mut best_val = state.best_val_miou;
    let mut best_model = None;
    let mut log = Vec::new();
    let mut interrupted = false;
    let start_epoch = (step / per_epoch) as usize;
    let mut clock = Instant::now();

    'epochs: for epoch in start_epoch..cfg.epochs {
        let skip = if epoch == start_epoch { (step % per_epoch) as usize } else { 0 };
        for (bi, batch) in data.batches_with(Split::Train, cfg.batch_size, epoch_seed(cfg.seed, epoch), opts)?.enumerate() {
            let batch = batch?;
            if bi < skip {
                continue;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                interrupted = true;
                break 'epochs;
            }
            let value = train_step(&mut model, &mut adam, batch.images, &batch.masks, &cfg.loss).map_err(|e| {
                Error::Training(format!("diverged at epoch {epoch}, batch {bi}: {e}"))
            })?;
            epoch_loss_sum += value;
            step += 1;
        }

        let last_epoch = epoch + 1 == cfg.epochs;
        let mut record = EpochRecord {
            epoch,
            step,
            train_loss: epoch_loss_sum / per_epoch as f64,
            val_miou: None,
            val_pixel_accuracy: None,
            seconds: 0.0,
        };
        epoch_loss_sum = 0.0;
        if has_val && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let report = evaluate(&model, data, Split::Val, cfg.batch_size)?;
            record.val_miou = Some(report.miou);
            record.val_pixel_accuracy = Some(report.pixel_accuracy);
            if best_val.is_none_or(|b| report.miou > b) {
                best_val = Some(report.miou);
                best_model = Some(model.clone());
                if let Some(p) = &cfg.best_checkpoint {
                    let mut c = Checkpoint::from_model(model.clone());
                    c.step = step;
                    c.best_val_miou = best_val;
                    c.save(p)?;
                }
            }
        }
        record.seconds = clock.elapsed().as_secs_f64();
        clock = Instant::now();
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        log.push(record);
    }

    let last = Checkpoint { model: model.clone(), adam: Some(adam), step, best_val_miou: best_val, epoch_loss_sum };
    if let Some(p) = &cfg.last_checkpoint {
        last.save(p)?;
    }
    Ok(TrainOutcome { model, best_model, best_val_miou: best_val, log, step, interrupted, last })
}

/// Confusion-matrix metrics over a split; padded pixels are ignored.
pub fn evaluate(model: &LemmaModel, data: &Dataset, split: Split, batch_size: usize) -> Result<MiouReport> {
    confusion(model, data, split, batch_size)?.miou()
}

pub fn confusion(model: &LemmaModel, data: &Dataset, split: Split, batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(data.num_classes());
    if model.config.nc != data.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model.config.nc,
            data.num_classes()
        )));
    }
    for batch in data.ordered_batches(split, batch_size.max(1))? {
        let batch = batch?;
        let pred = argmax_channels(&model.scores(&batch.images)?)?;
        cm.accumulate(&pred, &batch.masks)?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub nrb_l: usize,
    pub nrb_m: usize,
    pub nrb_h: usize,
    pub params: usize,
    pub gflops: f64,
    pub miou: f64,
}

/// Train and evaluate every grid point with the same settings; GFLOPs are
/// counted at `flops_hw`.
pub fn ablate(data: &Dataset, grid: &[BlockCounts], base: &TrainConfig, flops_hw: (usize, usize)) -> Result<Vec<AblationRow>> {
    let split = if data.split_indices(Split::Val).is_empty() { Split::Train } else { Split::Val };
    grid.iter()
        .map(|b| {
            let mut cfg = base.clone();
            cfg.model = LemmaConfig { nrb_l: b.0, nrb_m: b.1, nrb_h: b.2, ..base.model };
            cfg.best_checkpoint = None;
            cfg.last_checkpoint = None;
            cfg.log_path = None;
            let out = train(data, &cfg, None)?;
            let model = out.best_model.as_ref().unwrap_or(&out.model);
            let report = evaluate(model, data, split, cfg.batch_size)?;
            let flops = count_flops(&cfg.model, flops_hw.0, flops_hw.1)?;
            Ok(AblationRow {
                nrb_l: b.0,
                nrb_m: b.1,
                nrb_h: b.2,
                params: model.count_params(),
                gflops: flops.gflops,
                miou: report.miou,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("nrb_l,nrb_m,nrb_h,params,gflops,miou\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{:.4},{:.4}\n", r.nrb_l, r.nrb_m, r.nrb_h, r.params, r.gflops, r.miou));
    }
    s
}

pub fn write_ablation_csv(path: impl AsRef<std::path::Path>, rows: &[AblationRow]) -> Result<()> {
    fs::write(path, ablation_csv(rows))?;
    Ok(())
}
