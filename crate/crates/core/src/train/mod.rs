//! Optimisation loop: schedule, optimizer, checkpoints and the trainer.

mod checkpoint;
mod optimizer;
mod schedule;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use optimizer::{clip_grad_norm, AdamW};
pub use schedule::Schedule;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stream_rng, ParamStore, Rng, RngState, Tape};
use crate::config::Config;
use crate::data::{Batch, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, predict};
use crate::model::{build_variant, Model};
use crate::nn::Ctx;

/// Stream of the seed reserved for dropout; epoch shuffles use `1 + epoch`
/// and initialisation uses stream 0.
pub const DROPOUT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Updates completed, counting this one.
    pub step: usize,
    pub l_reg: f64,
    pub l_aux: f64,
    pub l_div: f64,
    pub total: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRecord {
    pub epoch: usize,
    pub step: usize,
    pub valid_mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step(StepRecord),
    Valid(ValidRecord),
}

pub fn write_log(records: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub struct TrainOutcome {
    /// State with the lowest validation MAE seen at an epoch boundary.
    pub best: Checkpoint,
    /// State after the final update.
    pub last: Checkpoint,
    pub log: Vec<LogRecord>,
}

pub struct Trainer<'d> {
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    pub log: Vec<LogRecord>,
    dataset: &'d Dataset,
    train: Vec<&'d Sample>,
    dropout_rng: Rng,
    step: usize,
    best_valid_mae: Option<f64>,
    best: Option<Checkpoint>,
    epoch_order: Option<(usize, Vec<usize>)>,
}

impl<'d> Trainer<'d> {
    pub fn new(config: &Config, dataset: &'d Dataset) -> Result<Self> {
        let (model, store) = build_variant(config, dataset.manifest.widths.as_array())?;
        let optimizer = AdamW::new(&store, config.weight_decay);
        Self::assemble(model, store, optimizer, stream_rng(config.seed, DROPOUT_STREAM), 0, None, dataset)
    }

    /// Continues from `ckpt` exactly where the run that wrote it stood.
    pub fn resume(ckpt: &Checkpoint, dataset: &'d Dataset) -> Result<Self> {
        if ckpt.widths != dataset.manifest.widths.as_array() {
            return Err(Error::Checkpoint(format!(
                "checkpoint input widths {:?} do not match dataset {:?}",
                ckpt.widths,
                dataset.manifest.widths.as_array()
            )));
        }
        let (model, store) = ckpt.restore_model()?;
        let step = usize::try_from(ckpt.step).map_err(|_| Error::Checkpoint("step overflows usize".into()))?;
        Self::assemble(model, store, ckpt.optimizer.clone(), ckpt.rng.restore(), step, ckpt.best_valid_mae, dataset)
    }

    fn assemble(
        model: Model,
        store: ParamStore,
        optimizer: AdamW,
        dropout_rng: Rng,
        step: usize,
        best_valid_mae: Option<f64>,
        dataset: &'d Dataset,
    ) -> Result<Self> {
        let train = dataset.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let c = &model.config;
        let schedule = Schedule::new(c.learning_rate, c.warmup_steps, c.total_steps);
        Ok(Self {
            model,
            store,
            optimizer,
            schedule,
            log: Vec::new(),
            dataset,
            train,
            dropout_rng,
            step,
            best_valid_mae,
            best: None,
            epoch_order: None,
        })
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }

    /// Updates completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config().batch_size)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model.config,
            self.model.widths,
            &self.store,
            &self.optimizer,
            RngState::capture(self.model.config.seed, &self.dropout_rng),
            self.step as u64,
            self.best_valid_mae,
        )
    }

    fn next_batch(&mut self) -> Batch {
        let bpe = self.batches_per_epoch();
        let epoch = self.step / bpe;
        let idx = self.step % bpe;
        if self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut stream_rng(self.model.config.seed, 1 + epoch as u64));
            self.epoch_order = Some((epoch, order));
        }
        let order = &self.epoch_order.as_ref().expect("set above").1;
        let bs = self.model.config.batch_size;
        let end = ((idx + 1) * bs).min(order.len());
        let chunk: Vec<&Sample> = order[idx * bs..end].iter().map(|&i| self.train[i]).collect();
        Batch::from_samples(&chunk)
    }

    /// One optimizer update on the next training batch.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        self.store.zero_grads();
        let mut tape = Tape::new();
        let dropout = self.model.config.dropout;
        let mut ctx = Ctx::train(dropout, &mut self.dropout_rng);
        let (loss, parts, _) = self.model.loss(&mut tape, &self.store, &batch, &mut ctx)?;
        if !parts.total.is_finite() {
            return Err(self.non_finite(&batch));
        }
        tape.backward(loss)?;
        self.store.accumulate_grads(&tape);
        let grad_norm = clip_grad_norm(&mut self.store, self.model.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(&batch));
        }
        let lr = self.schedule.lr_at(self.step + 1);
        self.optimizer.step(&mut self.store, lr)?;
        self.step += 1;
        let rec = StepRecord {
            step: self.step,
            l_reg: parts.l_reg,
            l_aux: parts.l_aux,
            l_div: parts.l_div,
            total: parts.total,
            lr,
            grad_norm,
        };
        self.log.push(LogRecord::Step(rec));
        if self.step % self.batches_per_epoch() == 0 || self.step == self.model.config.total_steps {
            self.validate()?;
        }
        Ok(rec)
    }

    fn non_finite(&self, batch: &Batch) -> Error {
        log::error!(
            "non-finite loss or gradient at update {}; batch ids: {}",
            self.step + 1,
            batch.ids.join(", ")
        );
        Error::NonFiniteLoss {
            step: self.step + 1,
            batch_ids: batch.ids.clone(),
        }
    }

    fn validate(&mut self) -> Result<()> {
        if self.dataset.split(Split::Valid).is_empty() {
            return Ok(());
        }
        let report = evaluate_split(&self.model, &self.store, self.dataset, Split::Valid)?;
        let epoch = self.step.div_ceil(self.batches_per_epoch());
        self.log.push(LogRecord::Valid(ValidRecord {
            epoch,
            step: self.step,
            valid_mae: report.mae,
        }));
        log::info!("epoch {epoch} step {} valid MAE {:.4}", self.step, report.mae);
        if self.best_valid_mae.is_none_or(|b| report.mae < b) {
            self.best_valid_mae = Some(report.mae);
            self.best = Some(self.checkpoint());
        }
        Ok(())
    }

    /// Runs until `until` updates have been applied (capped at the schedule end).
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.model.config.total_steps);
        while self.step < until {
            self.train_step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<TrainOutcome> {
        let total = self.model.config.total_steps;
        self.run_until(total)?;
        let last = self.checkpoint();
        Ok(TrainOutcome {
            best: self.best.unwrap_or_else(|| last.clone()),
            last,
            log: self.log,
        })
    }

    /// Mean squared error of eval-mode predictions on the training split.
    pub fn train_mse(&self) -> Result<f64> {
        mse(&self.model, &self.store, &self.train)
    }
}

pub fn mse(model: &Model, store: &ParamStore, samples: &[&Sample]) -> Result<f64> {
    let preds = predict(model, store, samples, model.config.batch_size)?;
    Ok(preds
        .iter()
        .zip(samples)
        .map(|(p, s)| (p - s.label).powi(2))
        .sum::<f64>()
        / samples.len() as f64)
}

/// Trains `config` on `dataset` for `config.total_steps` updates.
pub fn train(config: &Config, dataset: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(config, dataset)?.finish()
}
