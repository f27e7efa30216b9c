//! AdamW with a warmup-plus-cosine schedule and a deterministic training
//! loop over generated batches.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::hybrid::{Checkpoint, HybridConfig, HybridError, HybridModel, ModelGraph, ParamStore};
use crate::numerics::Tensor;
use crate::tasks::{evaluate, generate, Metric, Split, TaskConfig, TaskError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("step {step} outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite gradient in {param}[{index}]")]
    NonFiniteGradient { param: String, index: usize },
    #[error("loss diverged at step {step}")]
    Diverged { step: usize, checkpoint: Box<Checkpoint> },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] HybridError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHyperparams {
    pub base_lr: f64,
    pub min_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Defaults to 5% of `total_steps`.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    /// Global-norm gradient clip; `0` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
}

impl OptimizerHyperparams {
    pub fn new(base_lr: f64, min_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            min_lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            total_steps,
            warmup_steps: None,
            clip_norm: default_clip(),
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or(self.total_steps / 20)
            .min(self.total_steps)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Hyperparams(m.into()));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.min_lr <= self.base_lr) || self.min_lr < 0.0 {
            return bad("need 0 <= min_lr <= base_lr");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be non-negative");
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, hp: &OptimizerHyperparams) -> Result<f64, TrainError> {
    let total = hp.total_steps;
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    let warmup = hp.warmup();
    if step < warmup {
        return Ok(hp.base_lr * step as f64 / warmup as f64);
    }
    if step == warmup {
        return Ok(hp.base_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(hp.min_lr + 0.5 * (hp.base_lr - hp.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl Moments {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One AdamW update at 1-based `step` with learning rate `lr`. Parameters
/// are untouched if any gradient is non-finite.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    moments: &mut Moments,
    step: usize,
    lr: f64,
    hp: &OptimizerHyperparams,
) -> Result<(), TrainError> {
    if step == 0 {
        return Err(TrainError::StepOutOfRange {
            step,
            total: hp.total_steps,
        });
    }
    if params.len() != grads.len() || params.len() != moments.m.len() {
        return Err(TrainError::Shape("parameters, gradients and moments differ in count".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != moments.m[i].shape() {
            return Err(TrainError::Shape(format!("parameter {i}: shapes differ")));
        }
        if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: format!("#{i}"),
                index,
            });
        }
    }
    let c1 = 1.0 - hp.beta1.powi(step as i32);
    let c2 = 1.0 - hp.beta2.powi(step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + hp.weight_decay * *w);
        }
    }
    moments.step = step;
    Ok(())
}

/// Model weights plus optimizer state as one checkpoint.
pub fn optimizer_checkpoint(model: &HybridModel, moments: &Moments) -> Checkpoint {
    let mut ckpt = Checkpoint::from_model(model);
    for (i, name) in model.params.names().iter().enumerate() {
        ckpt.tensors.insert(format!("adam.m.{name}"), moments.m[i].clone());
        ckpt.tensors.insert(format!("adam.v.{name}"), moments.v[i].clone());
    }
    ckpt.header.extra = serde_json::json!({ "adam_step": moments.step });
    ckpt.header.tensors = ckpt.tensors.len();
    ckpt
}

/// Inverse of [`optimizer_checkpoint`].
pub fn restore_optimizer(ckpt: &Checkpoint) -> Result<(HybridModel, Moments), TrainError> {
    let model = ckpt.to_model()?;
    let fetch = |name: String| {
        ckpt.tensors
            .get(&name)
            .cloned()
            .ok_or_else(|| TrainError::Model(HybridError::Checkpoint(format!("missing {name}"))))
    };
    let mut moments = Moments::zeros_like(model.params.tensors());
    for (i, name) in model.params.names().iter().enumerate() {
        moments.m[i] = fetch(format!("adam.m.{name}"))?;
        moments.v[i] = fetch(format!("adam.v.{name}"))?;
    }
    moments.step = ckpt.header.extra["adam_step"]
        .as_u64()
        .ok_or_else(|| TrainError::Model(HybridError::Checkpoint("missing adam_step".into())))? as usize;
    Ok((model, moments))
}

fn default_batch() -> usize {
    8
}
fn default_eval_examples() -> usize {
    128
}

/// Loop settings besides the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    /// Train on one fixed batch instead of fresh batches every step.
    #[serde(default)]
    pub fixed_batch: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            eval_examples: default_eval_examples(),
            fixed_batch: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub accuracy: f64,
    pub token_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub param_count: usize,
    pub losses: Vec<f64>,
    /// Scores on held-out examples (or on the training batch when it is fixed).
    pub final_metrics: FinalMetrics,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Equality ignoring wall time.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_time_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

fn batch_task(task: &TaskConfig, examples: usize, seed: u64, split: Split) -> TaskConfig {
    TaskConfig {
        examples,
        seed,
        split,
        ..task.clone()
    }
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Trains from a fresh initialization and returns the report and the
/// trained model.
pub fn train(
    config: &HybridConfig,
    task: &TaskConfig,
    hp: &OptimizerHyperparams,
    options: &TrainOptions,
    seed: u64,
) -> Result<(TrainReport, HybridModel), TrainError> {
    hp.validate()?;
    let vocab = task.effective_vocab()?;
    if vocab > config.vocab || task.seq_len > config.seq_len {
        return Err(TrainError::Hyperparams(format!(
            "task needs vocab {vocab} and length {}, model has {} and {}",
            task.seq_len, config.vocab, config.seq_len
        )));
    }
    if options.batch_size == 0 {
        return Err(TrainError::Hyperparams("batch_size must be positive".into()));
    }
    let start = Instant::now();
    let mut model = HybridModel::init(config, mix(seed, 0))?;
    let graph = ModelGraph::<f64>::build(&model, options.batch_size, task.seq_len)?;
    let mut moments = Moments::zeros_like(model.params.tensors());
    let fixed = generate(&batch_task(task, options.batch_size, mix(seed, 1), Split::Train))?;
    let mut losses = Vec::with_capacity(hp.total_steps);
    let mut last_good = model.params.clone();

    for step in 1..=hp.total_steps {
        let batch = if options.fixed_batch {
            fixed.clone()
        } else {
            generate(&batch_task(task, options.batch_size, mix(seed, 2 + step as u64), Split::Train))?
        };
        let tokens: Vec<usize> = batch.inputs.concat();
        let targets: Vec<i64> = batch.targets.concat();
        let bindings = graph.bind(&model.params, &tokens, &targets)?;
        let (loss, mut grads) = match graph.loss_and_gradient(&bindings) {
            Ok(v) => v,
            Err(HybridError::Numerics(_)) => return Err(diverged(&model, last_good, step)),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() {
            return Err(diverged(&model, last_good, step));
        }
        losses.push(loss);
        clip_global_norm(&mut grads, hp.clip_norm);
        let lr = cosine_lr(step, hp)?;
        last_good = model.params.clone();
        adamw_step(model.params.tensors_mut(), &grads, &mut moments, step, lr, hp).map_err(|e| match e {
            TrainError::NonFiniteGradient { index, param } => TrainError::NonFiniteGradient {
                param: name_of(&model.params, &param),
                index,
            },
            other => other,
        })?;
    }

    let eval = if options.fixed_batch {
        fixed
    } else {
        let full = TaskConfig {
            min_pairs: None,
            ..task.clone()
        };
        generate(&batch_task(&full, options.eval_examples, mix(seed, u64::MAX), Split::Eval))?
    };
    let final_metrics = FinalMetrics {
        accuracy: evaluate(&model, &eval, Metric::Accuracy)?,
        token_loss: evaluate(&model, &eval, Metric::TokenLoss)?,
    };
    Ok((
        TrainReport {
            seed,
            steps: hp.total_steps,
            param_count: model.param_count(),
            losses,
            final_metrics,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
        model,
    ))
}

fn name_of(params: &ParamStore, index_tag: &str) -> String {
    index_tag
        .trim_start_matches('#')
        .parse::<usize>()
        .ok()
        .and_then(|i| params.names().get(i).cloned())
        .unwrap_or_else(|| index_tag.to_string())
}

fn diverged(model: &HybridModel, last_good: ParamStore, step: usize) -> TrainError {
    let mut snapshot = model.clone();
    snapshot.params = last_good;
    TrainError::Diverged {
        step,
        checkpoint: Box::new(Checkpoint::from_model(&snapshot)),
    }
}

#[cfg(test)]
mod tests;
