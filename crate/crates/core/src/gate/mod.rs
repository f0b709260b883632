//! The early-rejection gate: score a prompt, reject it when the estimate
//! falls strictly below the threshold, and quantify when gating pays for
//! itself in compute.

mod service;

pub use service::{serve, GateService, ServeHandle};

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::Scorer;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] crate::estimator::CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// The gate's runtime configuration: a loaded estimator and a threshold.
pub struct GateConfig {
    pub threshold: f64,
    pub scorer: Arc<dyn Scorer>,
    /// Which quality metric the estimator was trained against, for display.
    pub metric_tag: Option<crate::metrics::Metric>,
}

impl GateConfig {
    pub fn new(threshold: f64, scorer: Arc<dyn Scorer>) -> Result<Self, GateError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(GateError::InvalidThreshold(threshold));
        }
        Ok(GateConfig {
            threshold,
            scorer,
            metric_tag: None,
        })
    }
}

/// Outcome of gating one prompt. `score` is absent only in degraded mode,
/// when the estimator failed and the gate failed open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub rejected: bool,
    pub score: Option<f64>,
    pub threshold: f64,
    pub degraded: bool,
}

/// Score a prompt and reject it iff the score is strictly below the
/// threshold; a boundary score is accepted. Estimator failure fails open:
/// the prompt is accepted with the degraded flag set, so completions are
/// never lost to a broken gate.
pub fn decide(config: &GateConfig, prompt: &str) -> GateDecision {
    match config.scorer.score(prompt) {
        Ok(score) => GateDecision {
            rejected: score < config.threshold,
            score: Some(score),
            threshold: config.threshold,
            degraded: false,
        },
        Err(_) => GateDecision {
            rejected: false,
            score: None,
            threshold: config.threshold,
            degraded: true,
        },
    }
}

/// Inputs to the per-prompt expected-gain model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Probability that a prompt is rejected by the gate.
    pub alpha: f64,
    /// Probability that a rejected prompt is not resubmitted.
    pub beta: f64,
    /// Cost of one completion by the target model, in GFLOPs.
    pub e_lcm: f64,
    /// Cost of one estimation, in GFLOPs.
    pub e_qebc: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<(), GateError> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(GateError::InvalidCostModel(format!(
                "alpha {} and beta {} must lie in [0, 1]",
                self.alpha, self.beta
            )));
        }
        if self.e_lcm < 0.0 || self.e_qebc < 0.0 {
            return Err(GateError::InvalidCostModel(
                "per-prompt costs must be non-negative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Expected GFLOPs saved per handled prompt: every estimation costs
/// `e_qebc`, and a fraction `alpha * beta` of prompts skips a full
/// completion.
pub fn expected_gain(cost: &CostModel) -> f64 {
    cost.alpha * cost.beta * cost.e_lcm - cost.e_qebc
}

/// The `alpha * beta` product at which the gate breaks even.
pub fn break_even_alpha_beta(e_lcm: f64, e_qebc: f64) -> f64 {
    e_qebc / e_lcm
}

/// Enough architecture to evaluate the analytic FLOPs formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub n_params: u64,
    pub n_layers: u64,
    pub d_model: u64,
    pub seq_len: u64,
}

impl ArchSpec {
    pub fn new(name: &str, n_params: u64, n_layers: u64, d_model: u64, seq_len: u64) -> Self {
        ArchSpec {
            name: name.to_string(),
            n_params,
            n_layers,
            d_model,
            seq_len,
        }
    }
}

/// Analytic inference cost in GFLOPs: `2 * params * seq_len` for the weight
/// matmuls (one multiply-add counted as 2 FLOPs) plus
/// `2 * layers * seq_len^2 * d_model * 2` for the quadratic attention term
/// (a factor 2 for QK^T and AV). A convention, not a profiler: useful for
/// ordering architectures, not for reproducing any particular profiler's
/// absolute numbers.
pub fn flops_estimate(arch: &ArchSpec) -> f64 {
    let weights = 2.0 * arch.n_params as f64 * arch.seq_len as f64;
    let attention =
        2.0 * arch.n_layers as f64 * (arch.seq_len as f64).powi(2) * arch.d_model as f64 * 2.0;
    (weights + attention) / 1e9
}

/// Catalog of the comparison architectures at a given profiling length.
pub fn reference_archs(seq_len: u64) -> Vec<ArchSpec> {
    vec![
        ArchSpec::new("tcqe-16m", 16_000_000, 10, 320, seq_len),
        ArchSpec::new("gpt2-124m", 124_000_000, 12, 768, seq_len),
        ArchSpec::new("codebert-125m", 125_000_000, 12, 768, seq_len),
        ArchSpec::new("codet5-223m", 223_000_000, 24, 768, seq_len),
        ArchSpec::new("gpt-neo-1316m", 1_316_000_000, 24, 2048, seq_len),
    ]
}
