use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{derive_seed, Dataset};
use crate::degrade::{sample_patch, Image, Sample};
use crate::error::{Error, Result};
use crate::hair::{HairModel, ModelConfig};
use crate::metrics::{format_db, psnr, ssim, MetricsReport};
use crate::tensor::{Graph, Tensor};

use super::checkpoint::Checkpoint;
use super::optim::{adamw_step, AdamWConfig, OptimState};
use super::schedule::{LrSchedule, ScheduleUnit};

/// Base learning rate of the toy profile.
pub const TOY_LR: f64 = 2e-4;

const MODEL_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Steps(usize),
    /// Passes over the training images, `ceil(images / batch)` steps each.
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub budget: Budget,
    pub batch: usize,
    pub patch: usize,
    pub flips: bool,
    pub lr: f64,
    pub optim: AdamWConfig,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            seed: 0,
            budget: Budget::Steps(2000),
            batch: 4,
            patch: 32,
            flips: true,
            lr: TOY_LR,
            optim: AdamWConfig::default(),
            eval_every: 500,
        }
    }

    pub fn paper() -> Self {
        Self {
            seed: 0,
            budget: Budget::Epochs(160),
            batch: 32,
            patch: 128,
            flips: true,
            lr: 2e-4,
            optim: AdamWConfig::default(),
            eval_every: 0,
        }
    }

    pub fn steps_per_epoch(&self, train_images: usize) -> usize {
        train_images.div_ceil(self.batch.max(1)).max(1)
    }

    pub fn total_steps(&self, train_images: usize) -> usize {
        match self.budget {
            Budget::Steps(n) => n,
            Budget::Epochs(n) => n.saturating_mul(self.steps_per_epoch(train_images)),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.budget {
            Budget::Steps(n) => LrSchedule::new(self.lr, n, ScheduleUnit::Step),
            Budget::Epochs(n) => LrSchedule::new(self.lr, n, ScheduleUnit::Epoch),
        }
    }
}

/// Mean absolute error between two graph values.
pub fn l1_loss(g: &mut Graph<f32>, pred: crate::Var, target: crate::Var) -> Result<crate::Var> {
    g.l1_loss(pred, target)
}

/// One validation point of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    /// Mean batch loss since the previous row; `None` before any step.
    pub train_loss: Option<f64>,
    pub val: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Batch loss of every step, in order.
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// `step,lr,train_loss,val_psnr_<label>,val_ssim_<label>,...`
    pub fn to_csv(&self) -> String {
        let labels: Vec<String> = self
            .rows
            .first()
            .map(|r| r.val.rows().into_iter().map(|m| m.label).collect())
            .unwrap_or_default();
        let mut out = String::from("step,lr,train_loss");
        for l in &labels {
            let _ = write!(out, ",val_psnr_{l},val_ssim_{l}");
        }
        out.push('\n');
        for r in &self.rows {
            let loss = r.train_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = write!(out, "{},{:e},{loss}", r.step, r.lr);
            for l in &labels {
                match r.val.get(l) {
                    Some(m) => {
                        let _ = write!(out, ",{},{:.6}", format_db(m.psnr), m.ssim);
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Deterministic training of a HAIR network on a synthetic dataset.
pub struct Trainer<'a> {
    model: HairModel<f32>,
    optim: OptimState<f32>,
    config: TrainConfig,
    data: &'a Dataset,
    schedule: LrSchedule,
    steps_per_epoch: usize,
    total: usize,
    step: usize,
    log: TrainLog,
    pending: Vec<f64>,
}

impl<'a> Trainer<'a> {
    /// Fresh network initialised from the training seed.
    pub fn new(model: &ModelConfig, config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        let model = HairModel::new(model.clone(), derive_seed(config.seed, &[MODEL_STREAM]))?;
        Self::with_model(model, config, data)
    }

    pub fn with_model(model: HairModel<f32>, config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        if config.batch == 0 || config.patch == 0 {
            return Err(Error::invalid("train", "batch and patch must be positive"));
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let optim = OptimState::new(model.store());
        Ok(Self {
            model,
            optim,
            schedule: config.schedule(),
            steps_per_epoch: config.steps_per_epoch(data.train.len()),
            total: config.total_steps(data.train.len()),
            config,
            data,
            step: 0,
            log: TrainLog::default(),
            pending: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by an earlier run with the same config.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        let mut t = Self::with_model(ckpt.to_model()?, config, data)?;
        if let Some(o) = &ckpt.optim {
            t.optim = o.clone();
        }
        t.step = ckpt.step as usize;
        Ok(t)
    }

    pub fn model(&self) -> &HairModel<f32> {
        &self.model
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, Some(self.optim.clone()), self.config.seed, self.step as u64)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.schedule.at_step(step, self.steps_per_epoch)
    }

    /// Patch pairs for step `step`; sample `i` depends only on `(seed, step, i)`.
    pub fn batch(&self, step: usize) -> Result<Vec<Sample>> {
        (0..self.config.batch)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(self.config.seed, &[BATCH_STREAM, step as u64, i as u64]);
                let full = self.data.train_sample(derive_seed(s, &[0]))?;
                sample_patch(&full, self.config.patch, derive_seed(s, &[1]), self.config.flips)
            })
            .collect()
    }

    /// One optimisation step. A non-finite loss leaves the model untouched.
    pub fn step(&mut self) -> Result<f64> {
        let lr = self.lr_at(self.step)?;
        let batch = self.batch(self.step)?;
        let (loss, grads) = batch_gradients(&self.model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        adamw_step(self.model.store_mut(), &grads, &mut self.optim, &self.config.optim, lr)?;
        self.step += 1;
        self.log.losses.push(loss);
        self.pending.push(loss);
        Ok(loss)
    }

    pub fn evaluate(&self) -> Result<MetricsReport> {
        evaluate(&self.model, &self.data.val)
    }

    fn record(&mut self) -> Result<LogRow> {
        let lr = self.lr_at(self.step.saturating_sub(1).min(self.total.saturating_sub(1))).unwrap_or(0.0);
        let train_loss = (!self.pending.is_empty()).then(|| self.pending.iter().sum::<f64>() / self.pending.len() as f64);
        self.pending.clear();
        let row = LogRow {
            step: self.step,
            lr,
            train_loss,
            val: self.evaluate()?,
        };
        self.log.rows.push(row.clone());
        Ok(row)
    }

    /// Trains to the end of the budget, evaluating every `eval_every` steps
    /// and at the end. `on_row` sees the trainer after each evaluation.
    pub fn run_with(&mut self, mut on_row: impl FnMut(&Self, &LogRow) -> Result<()>) -> Result<()> {
        if self.step >= self.total {
            let row = self.record()?;
            return on_row(self, &row);
        }
        while self.step < self.total {
            self.step()?;
            let due = self.config.eval_every > 0 && self.step % self.config.eval_every == 0;
            if due || self.step == self.total {
                let row = self.record()?;
                on_row(self, &row)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_, _| Ok(()))
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            log: self.log,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Full run from a fresh initialisation.
pub fn train_loop(model: &ModelConfig, config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, config.clone(), data)?;
    t.run()?;
    Ok(t.into_outcome())
}

/// Mean L1 loss over the batch and its parameter gradients, summed in
/// sample order so the result does not depend on thread scheduling.
pub fn batch_gradients(model: &HairModel<f32>, batch: &[Sample]) -> Result<(f64, Vec<Tensor<f32>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_gradients", "empty batch"));
    }
    let per_sample: Vec<(f64, Vec<Tensor<f32>>)> = batch.par_iter().map(|s| sample_gradients(model, s)).collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, gs) in iter {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss / batch.len() as f64, grads))
}

fn as_batch(img: &Image) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    img.clone().reshape(&shape)
}

fn sample_gradients(model: &HairModel<f32>, s: &Sample) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(as_batch(&s.degraded)?);
    let target = g.constant(as_batch(&s.clean)?);
    let out = model.forward(&mut g, &bound, x)?;
    let loss = l1_loss(&mut g, out.restored, target)?;
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    let gs = bound
        .vars()
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::invalid("batch_gradients", "parameter without gradient")))
        .collect::<Result<_>>()?;
    Ok((value, gs))
}

/// Restored `[3, H, W]` image clamped to `[0, 1]`, plus its GIV.
pub fn restore_image(model: &HairModel<f32>, img: &Image) -> Result<(Image, Option<Vec<f64>>)> {
    let (out, giv) = model.infer(&as_batch(img)?)?;
    let out = out.reshape(img.shape())?.map(|v| v.clamp(0.0, 1.0));
    Ok((out, giv.map(|t| t.data().iter().map(|&v| v as f64).collect())))
}

/// PSNR/SSIM of restored vs clean, per degradation label.
pub fn evaluate(model: &HairModel<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    let scores: Vec<(String, f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let (out, _) = restore_image(model, &s.degraded)?;
            Ok((s.label(), psnr(&out, &s.clean, 1.0)?, ssim(&out, &s.clean)?))
        })
        .collect::<Result<_>>()?;
    Ok(report(scores))
}

/// PSNR/SSIM of the degraded inputs themselves.
pub fn evaluate_degraded(samples: &[Sample]) -> Result<MetricsReport> {
    let scores: Vec<(String, f64, f64)> = samples
        .par_iter()
        .map(|s| Ok((s.label(), psnr(&s.degraded, &s.clean, 1.0)?, ssim(&s.degraded, &s.clean)?)))
        .collect::<Result<_>>()?;
    Ok(report(scores))
}

fn report(scores: Vec<(String, f64, f64)>) -> MetricsReport {
    let mut r = MetricsReport::new();
    for (label, p, s) in scores {
        r.add(&label, p, s);
    }
    r
}

/// GIV of each degraded sample with its label.
pub fn extract_givs(model: &HairModel<f32>, samples: &[Sample]) -> Result<Vec<(Vec<f64>, String)>> {
    samples
        .par_iter()
        .map(|s| {
            let (_, giv) = restore_image(model, &s.degraded)?;
            let giv = giv.ok_or_else(|| Error::invalid("extract_givs", "model has no classifier"))?;
            Ok((giv, s.label()))
        })
        .collect()
}
