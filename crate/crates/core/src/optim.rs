//! AdamW, the warmup/cosine schedule, global-norm clipping, and the
//! deterministic training loop.

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::encoders::{
    apply_lock, backward_u, backward_v, encode_v, EncoderConfig, EncoderStack, Gradients,
    LockMode, ParamGroup, ParamSlot,
};
use crate::error::{CwclError, Result};
use crate::losses::{cross_modal_transfer_loss, symmetric_cl_loss, Temperature};
use crate::numerics::{Matrix, Rng};
use crate::weights::{weights_from_embeddings, WeightKind};
use crate::zeroshot::{self, ClassEmbeddingMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update with decoupled weight decay:
    /// `θ ← θ - lr (m̂ / (sqrt(v̂) + ε) + λ θ)`.
    pub fn step(&mut self, params: &mut [ParamSlot<'_>], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(CwclError::shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.data.len() != self.first[i].len() || g.len() != p.data.len() {
                return Err(CwclError::shape(format!("tensor {i} changed size")));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.decay { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                let x = p.data[j];
                p.data[j] = x - lr * (m_hat / (v_hat.sqrt() + epsilon) + decay * x);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every slice.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(CwclError::invalid("max_norm must be positive"));
    }
    let total = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Symmetric contrastive loss.
    Cl,
    /// Weighted loss from U to V plus contrastive loss from V to U.
    #[default]
    Cwcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    WarmupCosine,
    WarmupConstant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub schedule: Schedule,
    pub clip_norm: f64,
    pub loss: LossKind,
    pub weight_kind: WeightKind,
    pub lock: LockMode,
    pub tau: f64,
    pub learnable_tau: bool,
    pub seed: u64,
    pub adamw: AdamWConfig,
    pub encoder: EncoderConfig,
    pub class_embedding: ClassEmbeddingMode,
    /// Evaluate zero-shot accuracy after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            warmup_steps: 100,
            schedule: Schedule::WarmupCosine,
            clip_norm: 10.0,
            loss: LossKind::Cwcl,
            weight_kind: WeightKind::Linear,
            lock: LockMode::LockV,
            tau: crate::losses::DEFAULT_TAU,
            learnable_tau: false,
            seed: 0,
            adamw: AdamWConfig::default(),
            encoder: EncoderConfig::default(),
            class_embedding: ClassEmbeddingMode::NormalizeThenAverage,
            eval_each_epoch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CwclError::invalid("batch_size must be >= 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(CwclError::invalid("learning_rate must be finite and >= 0"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(CwclError::invalid("clip_norm must be > 0"));
        }
        if matches!(self.weight_kind, WeightKind::ClassIndicator) {
            return Err(CwclError::invalid(
                "class_indicator weights need labels, which training never sees",
            ));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return Err(CwclError::invalid("AdamW betas must be in [0, 1) and epsilon > 0"));
        }
        Temperature::new(self.tau, self.learnable_tau)?;
        Ok(())
    }

    pub fn temperature(&self) -> Result<Temperature> {
        let mut t = Temperature::new(self.tau, self.learnable_tau)?;
        t.clamp();
        Ok(t)
    }

    /// Update steps for a training split of `train_len` samples.
    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * (train_len / self.batch_size.max(1))
    }
}

/// Linear warmup from 0 to the base rate, then cosine decay to 0 at
/// `total_steps` (or a constant rate, per the schedule).
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let base = config.learning_rate;
    let warm = config.warmup_steps;
    if step < warm {
        return base * step as f64 / warm as f64;
    }
    match config.schedule {
        Schedule::WarmupConstant => base,
        Schedule::WarmupCosine => {
            if total_steps <= warm {
                return if step >= total_steps { 0.0 } else { base };
            }
            let progress = ((step - warm) as f64 / (total_steps - warm) as f64).min(1.0);
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub tau: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    pub stack: EncoderStack,
    pub metrics: Vec<EpochMetrics>,
}

/// Builds the initial stack for a dataset and config.
pub fn init_stack(config: &TrainConfig, ds: &PairedDataset) -> Result<EncoderStack> {
    EncoderStack::init(
        &config.encoder,
        ds.u_features.cols(),
        ds.v_features.cols(),
        config.temperature()?,
        config.lock,
        ds.teacher_seed(),
        config.seed,
    )
}

/// Loss value and locked gradients for one batch.
pub fn batch_gradients(
    config: &TrainConfig,
    stack: &EncoderStack,
    xu: &Matrix,
    xv: &Matrix,
) -> Result<(f64, Gradients)> {
    let p = stack.u.forward(xu)?;
    let v = encode_v(&stack.teacher, xv)?;
    let out = match config.loss {
        LossKind::Cl => symmetric_cl_loss(&p, &v.post, &stack.tau)?,
        LossKind::Cwcl => {
            let w = weights_from_embeddings(config.weight_kind, &v.pre)?;
            cross_modal_transfer_loss(&p, &v.post, &w, &stack.tau)?
        }
    };
    let lock = stack.lock;
    let mut grads = Gradients::zeros(stack);
    if lock.u_trainable() {
        grads.u = backward_u(&stack.u, xu, &out.grad_p)?;
    }
    if lock.v_projection_trainable() || lock.v_map_trainable() {
        let (map, proj) = backward_v(&stack.teacher, xv, &out.grad_q, lock.v_map_trainable())?;
        grads.v_map = map;
        grads.v_proj = proj;
    }
    grads.log_tau = out.grad_log_tau.unwrap_or(0.0);
    Ok((out.value, apply_lock(lock, grads)))
}

/// Trains `stack` on the train split. Deterministic for a fixed config,
/// dataset and initial stack.
pub fn train(config: &TrainConfig, ds: &PairedDataset, mut stack: EncoderStack) -> Result<TrainOutcome> {
    config.validate()?;
    let train_idx = ds.train_indices();
    let batches_per_epoch = train_idx.len() / config.batch_size;
    if config.epochs > 0 && batches_per_epoch == 0 {
        return Err(CwclError::invalid(format!(
            "{} training samples cannot fill a batch of {}",
            train_idx.len(),
            config.batch_size
        )));
    }
    let total_steps = config.total_steps(train_idx.len());

    // Only groups the lock mode leaves trainable are handed to AdamW, so
    // frozen tensors also escape weight decay.
    let groups: Vec<ParamGroup> = stack.param_slots().iter().map(|s| s.group).collect();
    let trainable: Vec<bool> = groups.iter().map(|&g| stack.is_trainable(g)).collect();
    let sizes: Vec<usize> = stack
        .param_slots()
        .iter()
        .zip(&trainable)
        .filter(|(_, &t)| t)
        .map(|(s, _)| s.data.len())
        .collect();
    let mut opt = AdamWState::new(config.adamw, &sizes);

    let mut order_rng = Rng::derive(config.seed, "batch-order");
    let mut order = train_idx.clone();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks_exact(config.batch_size).enumerate() {
            let xu = ds.u_features.select_rows(chunk);
            let xv = ds.v_features.select_rows(chunk);
            let (value, mut grads) = match batch_gradients(config, &stack, &xu, &xv) {
                Ok(r) => r,
                Err(CwclError::NonFinite(_)) => return Err(CwclError::Divergence { step, batch: b }),
                Err(e) => return Err(e),
            };
            if !value.is_finite() {
                return Err(CwclError::Divergence { step, batch: b });
            }
            loss_sum += value;

            {
                let mut slices: Vec<&mut [f64]> = grads
                    .slices_mut()
                    .into_iter()
                    .zip(&trainable)
                    .filter(|(_, &t)| t)
                    .map(|((_, s), _)| s)
                    .collect();
                clip_global_norm(&mut slices, config.clip_norm)?;
            }
            lr = lr_at(config, step, total_steps);
            let grad_slices: Vec<&[f64]> = grads
                .slices()
                .into_iter()
                .zip(&trainable)
                .filter(|(_, &t)| t)
                .map(|((_, s), _)| s)
                .collect();
            let mut slots: Vec<ParamSlot<'_>> = stack
                .param_slots()
                .into_iter()
                .zip(&trainable)
                .filter(|(_, &t)| t)
                .map(|(s, _)| s)
                .collect();
            opt.step(&mut slots, &grad_slices, lr)?;
            stack.tau.clamp();
            step += 1;
        }
        let zero_shot_accuracy = if config.eval_each_epoch {
            Some(zeroshot::evaluate(ds, &stack, config.class_embedding)?.top1_accuracy)
        } else {
            None
        };
        metrics.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            lr,
            tau: stack.tau.tau(),
            zero_shot_accuracy,
        });
    }
    Ok(TrainOutcome { stack, metrics })
}

/// One JSON object per line.
pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}
