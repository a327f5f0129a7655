//! Training loop: AdamW, cosine schedule with linear warmup, label smoothing.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{GradMap, StatUpdate, Tape};
use crate::backbone::{backbone_forward, BackboneParams, VariantConfig};
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::nn::{Module, ParamKind};
use crate::tensor::{BatchNormMode, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Decoupled decay, applied to conv and linear weights only.
    pub weight_decay: f64,
    pub seed: u64,
    /// Fraction of all steps spent in linear warmup, in `[0, 1)`.
    pub warmup_frac: f64,
    pub label_smoothing: f64,
    pub bn_momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 2e-3,
            weight_decay: 0.05,
            seed: 0,
            warmup_frac: 0.05,
            label_smoothing: 0.1,
            bn_momentum: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs must be positive and batch_size at least 2".into()));
        }
        if self.base_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} is outside [0, 1)", self.warmup_frac)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total`: linear warmup, then cosine decay to zero.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.step as usize
    }

    /// Updates every learnable tensor that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut impl Module<T>, grads: &GradMap<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let moments = &mut self.moments;
        let (eps, wd) = (self.eps, self.weight_decay);
        params.visit_mut("", &mut |name, p, kind| {
            if kind != ParamKind::Weight {
                return;
            }
            let Some(g) = grads.by_name(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
            let decay = if p.rank() >= 2 { 1.0 - lr * wd } else { 1.0 };
            let (b1t, b2t) = (T::of(b1), T::of(b2));
            let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let (lr_t, c1t, c2t, eps_t, decay_t) = (T::of(lr), T::of(c1), T::of(c2), T::of(eps), T::of(decay));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1t * *mv + one_b1 * gv;
                *vv = b2t * *vv + one_b2 * gv * gv;
                let update = (*mv / c1t) / ((*vv / c2t).sqrt() + eps_t);
                *pv = decay_t * *pv - lr_t * update;
            }
        });
    }
}

/// Folds recorded batch statistics into the running statistics of the matching batch norms.
pub fn apply_bn_updates<T: Scalar>(params: &mut impl Module<T>, updates: &[StatUpdate<T>], momentum: f64) {
    let by_name: HashMap<&str, &StatUpdate<T>> = updates.iter().map(|u| (u.name.as_str(), u)).collect();
    let mut pending: HashMap<String, Tensor<T>> = HashMap::new();
    params.visit_mut("", &mut |name, t, kind| {
        if kind != ParamKind::Buffer {
            return;
        }
        if let Some(prefix) = name.strip_suffix(".running_mean") {
            if by_name.contains_key(prefix) {
                pending.insert(prefix.to_string(), t.clone());
            }
        }
    });
    params.visit_mut("", &mut |name, t, _| {
        if let Some(prefix) = name.strip_suffix(".running_var") {
            if let (Some(u), Some(mean)) = (by_name.get(prefix), pending.get_mut(prefix)) {
                u.stats.update_running(mean.data_mut(), t.data_mut(), T::of(momentum));
            }
        }
    });
    params.visit_mut("", &mut |name, t, _| {
        if let Some(prefix) = name.strip_suffix(".running_mean") {
            if let Some(mean) = pending.remove(prefix) {
                *t = mean;
            }
        }
    });
}

/// First recorded node whose value is not finite, as `(scope, op)`.
pub fn first_non_finite<T: Scalar>(tape: &Tape<T>) -> Option<(String, String)> {
    tape.nodes().find(|n| !tape.value(n.var).is_finite()).map(|n| {
        let scope = match n.label {
            Some(l) => format!("{} [{l}]", n.scope),
            None => n.scope.to_string(),
        };
        (scope, n.kind.name().to_string())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean cross entropy without label smoothing.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean smoothed training loss over the epoch's steps.
    pub train_loss: f64,
    /// Accuracy of the train-mode predictions seen during the epoch.
    pub train_accuracy: f64,
    pub val: Option<EvalMetrics>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Eval-mode accuracy and loss; the result does not depend on `batch_size`.
pub fn evaluate<T: Scalar>(
    params: &BackboneParams<T>,
    cfg: &VariantConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalMetrics> {
    if data.num_classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let mut hits = 0;
    let mut loss = 0.0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(chunk);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let logits = backbone_forward(&mut tape, xv, params, cfg, BatchNormMode::Eval)?;
        hits += correct(tape.value(logits), &y);
        // per-sample losses, so the sum is independent of chunking
        let lv = tape.value(logits).clone();
        let k = lv.shape()[1];
        for (row, &label) in lv.data().chunks(k).zip(&y) {
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        accuracy: hits as f64 / n,
        loss: loss / n,
    })
}

/// One optimisation step on a batch; returns `(loss, correct predictions)`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    params: &mut BackboneParams<T>,
    cfg: &VariantConfig,
    opt: &mut AdamW<T>,
    x: Tensor<T>,
    labels: &[usize],
    lr: f64,
    tc: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let logits = backbone_forward(&mut tape, xv, params, cfg, BatchNormMode::Train)?;
    let loss = tape.cross_entropy(logits, labels, T::of(tc.label_smoothing))?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        let (scope, op) = first_non_finite(&tape).unwrap_or_else(|| ("loss".into(), "cross_entropy".into()));
        return Err(Error::Diverged {
            step: opt.steps(),
            scope,
            op,
        });
    }
    let hits = correct(tape.value(logits), labels);
    let grads = tape.backward(loss)?;
    opt.step(params, &grads, lr);
    apply_bn_updates(params, tape.stat_updates(), tc.bn_momentum);
    Ok((loss_value, hits))
}

/// Trains in place and returns per-epoch metrics.
///
/// Deterministic for a fixed `(params, cfg, tc, data)`: batches are drawn
/// from a seeded shuffle and every kernel reduces in a fixed order.
pub fn train<T: Scalar>(
    params: &mut BackboneParams<T>,
    cfg: &VariantConfig,
    tc: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
) -> Result<Vec<EpochMetrics>> {
    tc.validate()?;
    if data.num_classes > cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::new(tc);
    // batches smaller than two carry no batch statistics and are skipped
    let per_epoch = data.len() / tc.batch_size + usize::from(data.len() % tc.batch_size >= 2);
    let total = per_epoch * tc.epochs;
    let warmup = (tc.warmup_frac * total as f64).round() as usize;
    let mut history = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut seen, mut steps) = (0.0, 0, 0, 0);
        let mut lr = 0.0;
        for chunk in order.chunks(tc.batch_size).filter(|c| c.len() >= 2) {
            lr = lr_at(step, total, warmup, tc.base_lr);
            let (x, y) = data.batch::<T>(chunk);
            let (l, h) = train_step(params, cfg, &mut opt, x, &y, lr, tc)?;
            loss_sum += l;
            hits += h;
            seen += chunk.len();
            steps += 1;
            step += 1;
        }
        let val = val.map(|v| evaluate(params, cfg, v, 256)).transpose()?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            val,
        };
        log::info!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  train acc {:.3}{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_accuracy,
            m.val.map(|v| format!("  val acc {:.3}  val loss {:.4}", v.accuracy, v.loss)).unwrap_or_default()
        );
        history.push(m);
    }
    Ok(history)
}
