//! Optimization loop.
//!
//! Each step runs forward, loss, backward, global-norm clipping, an AdamW
//! update and the cosine schedule. Batches depend only on `(seed, step)`, so
//! a resumed run replays the same sample order as an uninterrupted one.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::config::{parse_value, unknown_key, ConfigSection};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, NumericStage, Result};
use crate::model::{save_checkpoint, Checkpoint, GraphDepthModel};
use crate::objective::{compute_loss, compute_metrics, spearman, LossBreakdown, LossWeights, Metrics, Target};
use crate::optim::{adamw_step, clip_gradients, cosine_lr, global_norm, AdamWConfig, OptimizerState};
use crate::tensor::{Tape, Tensor};

pub const TRAIN_LOG: &str = "train.csv";
pub const METRICS_LOG: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Overrides `epochs` when set: total optimizer steps.
    pub steps: Option<u64>,
    pub clip_max_norm: f64,
    pub adamw: AdamWConfig,
    /// Seeds the batch order.
    pub seed: u64,
    /// Validation cadence in epochs; 0 disables periodic validation.
    pub eval_every: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            batch_size: 8,
            epochs: 100,
            steps: None,
            clip_max_norm: 1.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            eval_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl ConfigSection for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "steps" => {
                self.steps = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "clip_max_norm" => self.clip_max_norm = parse_value(key, value)?,
            "beta1" => self.adamw.beta1 = parse_value(key, value)?,
            "beta2" => self.adamw.beta2 = parse_value(key, value)?,
            "eps" => self.adamw.eps = parse_value(key, value)?,
            "weight_decay" => self.adamw.weight_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Err(unknown_key("train", key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_lr", self.base_lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps", self.steps.map_or("none".to_string(), |s| s.to_string())),
            ("clip_max_norm", self.clip_max_norm.to_string()),
            ("beta1", self.adamw.beta1.to_string()),
            ("beta2", self.adamw.beta2.to_string()),
            ("eps", self.adamw.eps.to_string()),
            ("weight_decay", self.adamw.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let a = &self.adamw;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("train.base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.clip_max_norm > 0.0 && self.clip_max_norm.is_finite()) {
            return Err(Error::config("train.clip_max_norm must be positive"));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::config("AdamW needs betas in [0, 1), eps > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// What happened on one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm actually applied.
    pub clipped_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss,l1,grad,unc,grad_norm,clipped_norm";

    pub fn csv_row(&self) -> String {
        let unc = self.loss.unc.map_or(String::new(), |u| u.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss.total,
            self.loss.l1,
            self.loss.grad,
            unc,
            self.grad_norm,
            self.clipped_norm
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    /// `(step, split, metrics)` for every evaluation.
    pub metrics: Vec<(u64, String, Metrics)>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub model: GraphDepthModel,
    pub optimizer: OptimizerState,
    /// Steps completed so far.
    pub step: u64,
    pub config: TrainConfig,
    pub weights: LossWeights,
}

impl Trainer {
    pub fn new(model: GraphDepthModel, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let optimizer = OptimizerState::new(model.params().tensors());
        Ok(Trainer {
            model,
            optimizer,
            step: 0,
            config,
            weights,
        })
    }

    /// Resumes from a checkpoint, restoring optimizer moments when stored.
    pub fn from_checkpoint(ckpt: Checkpoint, config: TrainConfig, weights: LossWeights) -> Result<Self> {
        let step = ckpt.step;
        let optimizer = ckpt.optimizer.clone();
        let mut t = Trainer::new(ckpt.into_model()?, config, weights)?;
        t.step = step;
        if let Some(state) = optimizer {
            if !state.matches(t.model.params().tensors()) {
                return Err(Error::config("checkpoint optimizer state does not match the model"));
            }
            t.optimizer = state;
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            step: self.step,
            params: self.model.params().clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn batches_per_epoch(&self, n_samples: usize) -> Result<u64> {
        if n_samples == 0 {
            return Err(Error::usage("training set is empty"));
        }
        let b = (n_samples / self.config.batch_size) as u64;
        if b == 0 {
            return Err(Error::config(format!(
                "batch size {} exceeds the {n_samples} training samples",
                self.config.batch_size
            )));
        }
        Ok(b)
    }

    pub fn total_steps(&self, n_samples: usize) -> Result<u64> {
        Ok(match self.config.steps {
            Some(s) => s,
            None => self.config.epochs * self.batches_per_epoch(n_samples)?,
        })
    }

    /// One optimizer step at learning rate `lr`. Parameters and moments are
    /// untouched when an error is returned.
    pub fn train_step(&mut self, input: &Tensor, target: &Target, lr: f64) -> Result<(LossBreakdown, f64, f64)> {
        let mut tape = Tape::new();
        let vars = self.model.params().bind(&mut tape);
        let x = tape.constant(input.clone());
        let (pred, _) = self.model.forward(&mut tape, &vars, x)?;
        let (loss, breakdown) = compute_loss(&mut tape, &pred, target, &self.weights)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite {
                op: "loss",
                tensor: loss.id(),
                stage: NumericStage::Forward,
            });
        }
        let grads = tape.backward(loss)?;
        let mut g: Vec<Vec<f64>> = vars
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect();
        let norm = clip_gradients(&mut g, self.config.clip_max_norm)?;
        let clipped = global_norm(&g);
        let mut params = self.model.params().clone();
        let mut state = self.optimizer.clone();
        adamw_step(params.tensors_mut(), &g, &mut state, lr, &self.config.adamw)?;
        if let Some(i) = params.tensors().iter().position(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                op: "adamw_step",
                tensor: i,
                stage: NumericStage::Forward,
            });
        }
        self.model.set_params(params)?;
        self.optimizer = state;
        self.step += 1;
        Ok((breakdown, norm, clipped))
    }

    /// Trains until the configured step count or until `on_step` returns
    /// `false`. With `out` set, writes the step log, validation metrics and
    /// checkpoints there; on a numeric failure the last good state is
    /// checkpointed before the error is returned.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord) -> bool,
    ) -> Result<TrainSummary> {
        let per_epoch = self.batches_per_epoch(train.len())?;
        let total = self.total_steps(train.len())?;
        let mut logs = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut t = BufWriter::new(File::create(dir.join(TRAIN_LOG))?);
                let mut m = BufWriter::new(File::create(dir.join(METRICS_LOG))?);
                writeln!(t, "{}", StepRecord::CSV_HEADER)?;
                writeln!(m, "{}", Metrics::CSV_HEADER)?;
                Some((t, m))
            }
            None => None,
        };
        let mut summary = TrainSummary::default();
        while self.step < total {
            let epoch = self.step / per_epoch;
            let batches = batch_iter(train.len(), self.config.batch_size, self.config.seed, epoch)?;
            let indices = &batches[(self.step % per_epoch) as usize];
            let (input, target) = train.batch(indices)?;
            let lr = cosine_lr(self.step, total, self.config.base_lr);
            let (loss, grad_norm, clipped_norm) = match self.train_step(&input, &target, lr) {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(dir), Error::NonFinite { .. }) = (out, &e) {
                        save_checkpoint(&dir.join(CHECKPOINT_DIR), &self.checkpoint())?;
                    }
                    return Err(e);
                }
            };
            let record = StepRecord {
                step: self.step,
                epoch,
                lr,
                loss,
                grad_norm,
                clipped_norm,
            };
            if let Some((t, _)) = logs.as_mut() {
                writeln!(t, "{}", record.csv_row())?;
            }
            let keep_going = on_step(&record);
            summary.records.push(record);

            let epoch_done = self.step % per_epoch == 0;
            let eval_due = self.config.eval_every > 0 && epoch_done && (self.step / per_epoch) % self.config.eval_every == 0;
            if let (true, Some(v)) = (eval_due, val) {
                let m = evaluate(&self.model, v, self.config.batch_size)?;
                if let Some((_, ml)) = logs.as_mut() {
                    writeln!(ml, "{}", m.csv_row(self.step, "val"))?;
                }
                summary.metrics.push((self.step, "val".into(), m));
            }
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                    save_checkpoint(&dir.join(CHECKPOINT_DIR), &self.checkpoint())?;
                }
            }
            if !keep_going {
                summary.stopped_early = true;
                break;
            }
        }
        if let Some((mut t, mut m)) = logs {
            t.flush()?;
            m.flush()?;
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join(CHECKPOINT_DIR), &self.checkpoint())?;
        }
        Ok(summary)
    }
}

/// Per-sample predictions of a dataset, each `H x W` row-major.
pub struct DatasetPredictions {
    pub depth: Vec<Vec<f64>>,
    pub log_var: Option<Vec<Vec<f64>>>,
}

pub fn predict_dataset(model: &GraphDepthModel, data: &Dataset, batch_size: usize) -> Result<DatasetPredictions> {
    let mut depth = Vec::with_capacity(data.len());
    let mut log_var: Option<Vec<Vec<f64>>> = model.config().uncertainty_head.then(Vec::new);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (input, _) = data.batch(chunk)?;
        let pred = model.predict(&input)?;
        let plane = pred.depth.numel() / chunk.len();
        depth.extend(pred.depth.data().chunks_exact(plane).map(<[f64]>::to_vec));
        if let (Some(out), Some(s)) = (log_var.as_mut(), pred.log_var) {
            out.extend(s.data().chunks_exact(plane).map(<[f64]>::to_vec));
        }
    }
    Ok(DatasetPredictions { depth, log_var })
}

/// Metrics pooled over every valid pixel of the dataset.
pub fn evaluate(model: &GraphDepthModel, data: &Dataset, batch_size: usize) -> Result<Metrics> {
    let preds = predict_dataset(model, data, batch_size)?;
    let mut p = Vec::new();
    let mut y = Vec::new();
    let mut m = Vec::new();
    for (d, s) in preds.depth.iter().zip(&data.samples) {
        p.extend_from_slice(d);
        y.extend(s.depth.iter().map(|&v| v as f64));
        m.extend_from_slice(&s.mask);
    }
    compute_metrics(&p, &y, &m)
}

/// Spearman correlation between the predicted standard deviation
/// `exp(S/2)` and the absolute error over every valid pixel. `None` when the
/// model has no uncertainty head.
pub fn uncertainty_correlation(preds: &DatasetPredictions, data: &Dataset) -> Result<Option<f64>> {
    let Some(log_var) = &preds.log_var else {
        return Ok(None);
    };
    let mut sigma = Vec::new();
    let mut err = Vec::new();
    for ((d, s), sample) in preds.depth.iter().zip(log_var).zip(&data.samples) {
        for i in (0..d.len()).filter(|&i| sample.mask[i]) {
            sigma.push((s[i] / 2.0).exp());
            err.push((d[i] - sample.depth[i] as f64).abs());
        }
    }
    spearman(&sigma, &err).map(Some)
}
