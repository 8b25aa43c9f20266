//! AdamW training loop: global-norm gradient clipping, linear learning-rate
//! decay, decoupled weight decay, and f32-quantized state.
//!
//! Parameters and both Adam moments are rounded through f32 after every
//! update, so the f32 checkpoint payloads are lossless and a resumed run
//! replays the exact trajectory of an uninterrupted one.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::TrainingInstance;
use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::pretrain::batch_gradients;
use crate::rng::{derive_seed, rng_for};
use crate::tokenizer::Vocab;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;
pub const CLIP_NORM: f64 = 1.0;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_SEED: u64 = 13;

/// Run-level training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every N steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: DEFAULT_SEED,
            checkpoint_every: 0,
        }
    }
}

/// Linear decay to zero: `base · max(0, 1 − step/total)`.
pub fn lr_at(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0)
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads {
            for v in &mut g.data {
                *v *= scale;
            }
        }
    }
    norm
}

/// Adam first/second moments, one pair per parameter in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed update count (bias-correction exponent).
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = (0..params.len())
            .map(|i| {
                let (r, c) = params.tensor(i).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Rebuild from checkpoint tensors (`opt.m.<name>` / `opt.v.<name>`).
    /// An empty map yields a fresh state; a partial one is an error.
    pub fn from_checkpoint(
        params: &ModelParams,
        opt: &BTreeMap<String, Tensor>,
        step: usize,
    ) -> Result<Self> {
        if opt.is_empty() {
            return Ok(AdamState::new(params));
        }
        let mut state = AdamState::new(params);
        state.t = step;
        for (i, name) in params.names().iter().enumerate() {
            for (prefix, store) in [("opt.m.", &mut state.m), ("opt.v.", &mut state.v)] {
                let key = format!("{prefix}{name}");
                let t = opt
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if t.shape() != params.tensor(i).shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer tensor `{key}` has shape {:?}, expected {:?}",
                        t.shape(),
                        params.tensor(i).shape()
                    )));
                }
                store[i] = t.clone();
            }
        }
        if opt.len() != 2 * params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint carries {} optimizer tensors, expected {}",
                opt.len(),
                2 * params.len()
            )));
        }
        Ok(state)
    }

    /// Name-keyed view for checkpointing.
    pub fn to_named(&self, params: &ModelParams) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, name) in params.names().iter().enumerate() {
            out.insert(format!("opt.m.{name}"), self.m[i].clone());
            out.insert(format!("opt.v.{name}"), self.v[i].clone());
        }
        out
    }
}

/// The scalar AdamW update with bias correction and decoupled weight decay,
/// over one tensor's entries. `t` is the 1-based update count.
pub fn adamw_update(
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    g: &[f64],
    lr: f64,
    t: usize,
) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + WEIGHT_DECAY * theta[i]);
    }
}

/// One optimizer step over every parameter, followed by f32 quantization of
/// parameters and moments.
pub fn adamw_step(params: &mut ModelParams, state: &mut AdamState, grads: &[Tensor], lr: f64) {
    assert_eq!(grads.len(), params.len());
    state.t += 1;
    for i in 0..params.len() {
        let theta = params.tensor_mut(i);
        adamw_update(
            &mut theta.data,
            &mut state.m[i].data,
            &mut state.v[i].data,
            &grads[i].data,
            lr,
            state.t,
        );
        theta.quantize_f32();
        state.m[i].quantize_f32();
        state.v[i].quantize_f32();
    }
}

/// One training-log line; serialized as a JSON object per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mlm: f64,
    pub mcp: f64,
    pub cvr: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Run training steps `start_step+1 ..= train.steps`. The hook sees every
/// completed step (for logging and periodic checkpoints). Deterministic:
/// batches, masks, and dropout derive from `train.seed` and the step index
/// alone, and all state is f32-quantized, so equal (seed, step) prefixes give
/// bit-identical params whether or not the run was interrupted.
pub fn train<F>(
    params: &mut ModelParams,
    state: &mut AdamState,
    model: &ModelConfig,
    train: &TrainConfig,
    instances: &[TrainingInstance],
    v: &Vocab,
    start_step: usize,
    mut hook: F,
) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog, &ModelParams, &AdamState) -> Result<()>,
{
    if instances.is_empty() && train.steps > start_step {
        return Err(Error::InvalidInput("no training instances".into()));
    }
    if train.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    let mut logs = Vec::with_capacity(train.steps.saturating_sub(start_step));
    for s in start_step..train.steps {
        let take = train.batch_size.min(instances.len());
        let mut rng = rng_for(train.seed, "batch", s as u64);
        let picked = rand::seq::index::sample(&mut rng, instances.len(), take);
        let batch: Vec<&TrainingInstance> = picked.iter().map(|i| &instances[i]).collect();
        let mask_seeds: Vec<u64> = (0..take)
            .map(|slot| derive_seed(train.seed, &format!("mask:{s}"), slot as u64))
            .collect();
        let dropout_seeds: Option<Vec<u64>> = (model.dropout > 0.0).then(|| {
            (0..take)
                .map(|slot| derive_seed(train.seed, &format!("dropout:{s}"), slot as u64))
                .collect()
        });

        let (loss, mut grads) =
            batch_gradients(params, model, &batch, v, &mask_seeds, dropout_seeds.as_deref())?;
        let grad_norm = clip_gradients(&mut grads, CLIP_NORM);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("global gradient norm".into()));
        }
        let lr = lr_at(train.lr, s, train.steps);
        adamw_step(params, state, &grads, lr);

        let log = StepLog {
            step: s + 1,
            mlm: loss.mlm,
            mcp: loss.mcp,
            cvr: loss.cvr,
            total: loss.total,
            lr,
            grad_norm,
        };
        hook(&log, params, state)?;
        logs.push(log);
    }
    Ok(logs)
}
