//! Mini-batch training with AdamW, per-epoch evaluation and early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{derive_seed, stream, with_pool};
use super::evaluate::{evaluate, EvalOptions};
use super::metrics::MetricsReport;
use super::model::{Model, ModelConfig, Variant};
use super::scene::Scene;
use crate::detect::GroundTruthBox;
use crate::numeric::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The step size decays linearly per epoch to `learning_rate · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied uniformly to every parameter.
    pub weight_decay: f64,
    /// Epochs without a test mAP improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.002,
            final_lr_fraction: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            patience: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::Config(format!("final_lr_fraction must be in [0, 1], got {}", self.final_lr_fraction)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("epsilon must be positive and weight_decay nonnegative".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Step size during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let x = epoch as f64 / self.epochs as f64;
        self.learning_rate * ((1.0 - x) * (1.0 - self.final_lr_fraction) + self.final_lr_fraction)
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.store().ids().map(|id| vec![0.0; model.store().get(id).len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let ids: Vec<_> = model.store().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = model.store_mut().get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = grads[k][i];
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
                p[i] -= lr * (update + cfg.weight_decay * p[i]);
            }
        }
    }
}

/// Mean loss and mean gradient over a batch. Per-sample work may run in parallel; the
/// reduction is in batch order, so the result does not depend on the worker count.
pub fn batch_gradient(model: &Model, batch: &[(&Tensor, &[GroundTruthBox])]) -> Result<(f64, Vec<Vec<f64>>)> {
    let per: Vec<(f64, Vec<Vec<f64>>)> = with_pool(|| {
        batch
            .par_iter()
            .map(|(img, gts)| model.loss_and_grad(img, gts).map(|(l, g)| (l.total, g)))
            .collect::<Result<_>>()
    })?;
    let n = batch.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grad) = iter.next().ok_or_else(|| Error::Config("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, x) in grad.iter_mut().zip(g) {
            acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
    }
    grad.iter_mut().flatten().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn check_finite(loss: f64, grads: &[Vec<f64>], context: impl Fn() -> String) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("{}: loss is {loss}", context())));
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Diverged(format!("{}: non-finite gradient", context())));
    }
    Ok(())
}

/// Repeated full-batch steps on fixed data; returns the loss before each step and the
/// loss after the last one.
pub fn fit_steps(model: &mut Model, data: &[Scene], steps: usize, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let batch: Vec<(&Tensor, &[GroundTruthBox])> = data.iter().map(|s| (&s.image, s.labels.as_slice())).collect();
    let mut opt = AdamW::new(model);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = batch_gradient(model, &batch)?;
        check_finite(loss, &grads, || format!("step {step}"))?;
        losses.push(loss);
        opt.step(model, &grads, cfg, cfg.learning_rate);
    }
    let (last, _) = batch_gradient(model, &batch)?;
    losses.push(last);
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model_variant: Variant,
    pub seed: u64,
    pub param_count: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Mean per-image training loss over each epoch's batches.
    pub epoch_losses: Vec<f64>,
    /// Clean test-split metrics after every epoch.
    pub per_epoch_metrics: Vec<MetricsReport>,
    /// Metrics of the model after the last epoch.
    #[serde(rename = "final")]
    pub final_metrics: MetricsReport,
}

impl RunRecord {
    /// A copy with wall-clock fields zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            per_epoch_metrics: self.per_epoch_metrics.iter().map(MetricsReport::without_timing).collect(),
            final_metrics: self.final_metrics.without_timing(),
            ..self.clone()
        }
    }
}

/// Trains one variant from a seeded initialization and evaluates on `test` after every epoch.
/// `progress` receives `(epoch, mean loss, clean metrics)`.
pub fn train(
    variant: Variant,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Scene],
    test_set: &[Scene],
    seed: u64,
    mut progress: impl FnMut(usize, f64, &MetricsReport),
) -> Result<(RunRecord, Model)> {
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("training needs nonempty train and test splits".into()));
    }
    let mut model = Model::new(variant, model_cfg, derive_seed(seed, stream::MODEL_INIT, 0))?;
    let mut opt = AdamW::new(&model);
    let eval_opts = EvalOptions {
        num_classes: model_cfg.detect.num_classes,
        ..EvalOptions::default()
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut per_epoch: Vec<MetricsReport> = Vec::new();
    let (mut best_map, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SHUFFLE, epoch as u64));
        order.shuffle(&mut rng);
        let lr = cfg.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(&Tensor, &[GroundTruthBox])> =
                chunk.iter().map(|&i| (&train_set[i].image, train_set[i].labels.as_slice())).collect();
            let (loss, grads) = batch_gradient(&model, &batch)?;
            check_finite(loss, &grads, || format!("{variant} seed {seed} epoch {epoch} batch {b}"))?;
            loss_sum += loss * chunk.len() as f64;
            opt.step(&mut model, &grads, cfg, lr);
        }
        let mean_loss = loss_sum / train_set.len() as f64;
        epoch_losses.push(mean_loss);
        let report = evaluate(&model, test_set, &eval_opts)?;
        progress(epoch, mean_loss, &report);
        if report.map50 > best_map {
            best_map = report.map50;
            best_epoch = epoch;
        }
        per_epoch.push(report);
        if epoch - best_epoch >= cfg.patience && epoch + 1 < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    let final_metrics = per_epoch.last().expect("at least one epoch").clone();
    Ok((
        RunRecord {
            model_variant: variant,
            seed,
            param_count: model.param_count(),
            epochs_run: per_epoch.len(),
            stopped_early,
            epoch_losses,
            per_epoch_metrics: per_epoch,
            final_metrics,
        },
        model,
    ))
}
