//! Training loop for the TCQE regressor, plus the finite-difference
//! gradient checker used to validate the hand-written backward pass.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::{backward, forward_cached, forward_unclamped, EstimatorParams, TcqeConfig};
use crate::oracle::LabeledExample;

/// Fixed work-unit size for parallel gradient accumulation. Chunk grads are
/// summed sequentially in index order, so loss traces are bit-identical
/// regardless of how many threads run.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Stop once the epoch MSE reaches this value, if set.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 5e-5,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::default(),
            target_loss: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("epochs and batch_size must be at least 1 and learning_rate positive")]
    InvalidConfig,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (grad norm {grad_norm:.3e})")]
    NanLoss {
        epoch: usize,
        batch: usize,
        grad_norm: f64,
    },
    #[error("predicted and target lengths differ: {predicted} vs {target}")]
    LengthMismatch { predicted: usize, target: usize },
    #[error(transparent)]
    Estimator(#[from] super::EstimatorError),
    #[error(transparent)]
    Checkpoint(#[from] super::CheckpointError),
}

/// Mean squared error over paired predictions and targets.
pub fn mse_loss(predicted: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(TrainError::LengthMismatch {
            predicted: predicted.len(),
            target: target.len(),
        });
    }
    let sse: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sse / predicted.len() as f64)
}

struct AdamState {
    m: EstimatorParams,
    v: EstimatorParams,
    step: u64,
}

fn apply_update(
    params: &mut EstimatorParams,
    grads: &EstimatorParams,
    optimizer: &Optimizer,
    lr: f64,
    adam: &mut Option<AdamState>,
) {
    match optimizer {
        Optimizer::Sgd => {
            for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (pv, gv) in p.iter_mut().zip(g.iter()) {
                    *pv -= lr * gv;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let state = adam.as_mut().expect("adam state initialized");
            state.step += 1;
            let bc1 = 1.0 - beta1.powi(state.step as i32);
            let bc2 = 1.0 - beta2.powi(state.step as i32);
            let mts = state.m.tensors_mut();
            let vts = state.v.tensors_mut();
            for (((_, p), (_, g)), ((_, m), (_, v))) in params
                .tensors_mut()
                .into_iter()
                .zip(grads.tensors())
                .zip(mts.into_iter().zip(vts))
            {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Gradients and sum of squared errors for a batch, accumulated in parallel
/// over fixed-size chunks and reduced in deterministic order.
fn batch_gradients(
    params: &EstimatorParams,
    examples: &[LabeledExample],
    batch: &[usize],
) -> Result<(EstimatorParams, f64), TrainError> {
    let inv_batch = 1.0 / batch.len() as f64;
    let chunks: Vec<(EstimatorParams, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(EstimatorParams, f64), TrainError> {
            let mut grads = params.zeros_like();
            let mut sse = 0.0;
            for &i in chunk {
                let example = &examples[i];
                let (y, cache) = forward_cached(params, &example.prompt_tokens)?;
                let err = y - example.score.value;
                sse += err * err;
                backward(params, &cache, 2.0 * err * inv_batch, &mut grads);
            }
            Ok((grads, sse))
        })
        .collect::<Result<_, _>>()?;

    let mut iter = chunks.into_iter();
    let (mut total, mut sse) = iter.next().expect("batch is non-empty");
    for (grads, chunk_sse) in iter {
        sse += chunk_sse;
        for ((_, t), (_, s)) in total.tensors_mut().into_iter().zip(grads.tensors()) {
            for (tv, sv) in t.iter_mut().zip(s.iter()) {
                *tv += sv;
            }
        }
    }
    Ok((total, sse))
}

fn grad_norm(grads: &EstimatorParams) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: EstimatorParams,
    /// Mean squared error per completed epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train a fresh TCQE model. Deterministic given the seed: fixed init,
/// fixed shuffle order, and order-independent parallelism. When
/// `checkpoint_dir` is set, a checkpoint is written after every epoch.
pub fn train(
    examples: &[LabeledExample],
    config: &TcqeConfig,
    train_config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if train_config.epochs == 0 || train_config.batch_size == 0 || train_config.learning_rate <= 0.0
    {
        return Err(TrainError::InvalidConfig);
    }

    let mut params = EstimatorParams::init(config, train_config.seed)?;
    let mut adam = match train_config.optimizer {
        Optimizer::Adam { .. } => Some(AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }),
        Optimizer::Sgd => None,
    };

    let mut indices: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train_config.epochs);
    for epoch in 0..train_config.epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(
            train_config
                .seed
                .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        indices.shuffle(&mut rng);

        let mut epoch_sse = 0.0;
        for (batch_idx, batch) in indices.chunks(train_config.batch_size).enumerate() {
            let (grads, sse) = batch_gradients(&params, examples, batch)?;
            if !sse.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch,
                    batch: batch_idx,
                    grad_norm: grad_norm(&grads),
                });
            }
            epoch_sse += sse;
            apply_update(
                &mut params,
                &grads,
                &train_config.optimizer,
                train_config.learning_rate,
                &mut adam,
            );
        }

        let epoch_loss = epoch_sse / examples.len() as f64;
        epoch_losses.push(epoch_loss);
        if let Some(dir) = checkpoint_dir {
            super::save_checkpoint(
                &dir.join(format!("epoch_{epoch:03}.tcqe")),
                &params,
                &format!("epoch-{epoch}"),
            )?;
        }
        if train_config.target_loss.is_some_and(|t| epoch_loss <= t) {
            break;
        }
    }

    Ok(TrainOutput { params, epoch_losses })
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub params_checked: usize,
}

fn batch_loss(params: &EstimatorParams, batch: &[(Vec<u32>, f64)]) -> f64 {
    let sse: f64 = batch
        .iter()
        .map(|(tokens, y)| {
            let pred = forward_unclamped(params, tokens).expect("valid batch");
            (pred - y) * (pred - y)
        })
        .sum();
    sse / batch.len() as f64
}

/// Compare analytic gradients of the batch MSE against central finite
/// differences on a random subset of each tensor. The relative error guards
/// its denominator at 1e-3 so parameters with near-zero gradients compare at
/// a fixed absolute scale instead of amplifying rounding noise.
pub fn grad_check(
    params: &EstimatorParams,
    batch: &[(Vec<u32>, f64)],
    epsilon: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut grads = params.zeros_like();
    let inv = 1.0 / batch.len() as f64;
    for (tokens, y) in batch {
        let (pred, cache) = forward_cached(params, tokens)?;
        backward(params, &cache, 2.0 * (pred - y) * inv, &mut grads);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let mut checked = 0usize;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let (name, analytic_tensor) = {
            let ts = grads.tensors();
            (ts[ti].0.clone(), ts[ti].1.clone())
        };
        let len = analytic_tensor.len();
        let sample: Vec<usize> = if len <= samples_per_tensor {
            (0..len).collect()
        } else {
            (0..samples_per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in sample {
            let original = probe.tensors_mut()[ti].1[j];
            probe.tensors_mut()[ti].1[j] = original + epsilon;
            let plus = batch_loss(&probe, batch);
            probe.tensors_mut()[ti].1[j] = original - epsilon;
            let minus = batch_loss(&probe, batch);
            probe.tensors_mut()[ti].1[j] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = analytic_tensor[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
                worst = name.clone();
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_tensor: worst,
        params_checked: checked,
    })
}
