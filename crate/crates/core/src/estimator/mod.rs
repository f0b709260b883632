//! The TCQE regressor: a small decoder-only Transformer whose linear head
//! reads the hidden state of the last prompt token and predicts a completion
//! quality score.
//!
//! All math is plain f64 on flat vectors. Forward and backward passes are
//! written out by hand so gradients can be verified against central finite
//! differences; checkpoints store tensors as little-endian f32.

mod baselines;
mod checkpoint;
mod train;

pub use baselines::{
    baseline_cc, baseline_coc, baseline_rand, rescale_scores, CcScorer, CocScorer, RandScorer,
    RescaledScores, Scorer, TcqeScorer,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use train::{
    grad_check, mse_loss, train, GradCheckReport, Optimizer, TrainConfig, TrainError, TrainOutput,
};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Architecture of a TCQE model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcqeConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

/// Named architecture presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small enough for gradient checks and synthetic training runs.
    Toy,
    /// The full-size estimator; stays within a 16M trainable-parameter budget.
    PaperScale,
}

impl Preset {
    pub fn config(&self) -> TcqeConfig {
        match self {
            Preset::Toy => TcqeConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 64,
                d_ff: 256,
                max_len: 256,
                vocab_size: 8192,
            },
            Preset::PaperScale => TcqeConfig {
                n_layers: 10,
                n_heads: 8,
                d_model: 320,
                d_ff: 1280,
                max_len: 256,
                vocab_size: 8192,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper-scale" | "paper_scale" | "full" => Ok(Preset::PaperScale),
            other => Err(EstimatorError::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
    #[error("cannot score an empty token sequence")]
    EmptyPrompt,
    #[error("token id {id} exceeds the model vocabulary ({vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

impl TcqeConfig {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(EstimatorError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EstimatorError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 || self.vocab_size == 0 {
            return Err(EstimatorError::InvalidConfig(
                "max_len and vocab_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Exact trainable-parameter count from the tensor shapes.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d                  // ln1 gain + bias
            + d * 3 * d + 3 * d                // qkv projection
            + d * d + d                        // attention output projection
            + 2 * d                            // ln2 gain + bias
            + d * self.d_ff + self.d_ff        // mlp up
            + self.d_ff * d + d; // mlp down
        self.vocab_size * d                    // token embeddings
            + self.max_len * d                 // positional embeddings
            + self.n_layers * per_layer
            + 2 * d                            // final layer norm
            + d + 1 // head weight + bias
    }
}

/// Per-layer trainable tensors, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// [d_model, 3 * d_model]: concatenated Q, K, V projections.
    pub w_qkv: Vec<f64>,
    pub b_qkv: Vec<f64>,
    /// [d_model, d_model]
    pub w_attn_proj: Vec<f64>,
    pub b_attn_proj: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    /// [d_model, d_ff]
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    /// [d_ff, d_model]
    pub w_fc_proj: Vec<f64>,
    pub b_fc_proj: Vec<f64>,
}

/// All trainable weights of a TCQE model.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub config: TcqeConfig,
    /// [vocab_size, d_model]
    pub wte: Vec<f64>,
    /// [max_len, d_model]
    pub wpe: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl EstimatorParams {
    /// GPT-2 style init: normal(0, 0.02) weights, zero biases, unit norms.
    pub fn init(config: &TcqeConfig, seed: u64) -> Result<Self, EstimatorError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid distribution");
        let mut randn = |n: usize| -> Vec<f64> {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        let d = config.d_model;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                w_qkv: randn(d * 3 * d),
                b_qkv: vec![0.0; 3 * d],
                w_attn_proj: randn(d * d),
                b_attn_proj: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w_fc: randn(d * config.d_ff),
                b_fc: vec![0.0; config.d_ff],
                w_fc_proj: randn(config.d_ff * d),
                b_fc_proj: vec![0.0; d],
            });
        }
        Ok(EstimatorParams {
            config: config.clone(),
            wte: randn(config.vocab_size * d),
            wpe: randn(config.max_len * d),
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head_w: randn(d),
            head_b: vec![0.0],
        })
    }

    /// Same shapes, all zeros. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, tensor) in out.tensors_mut() {
            tensor.iter_mut().for_each(|v| *v = 0.0);
        }
        out
    }

    /// Named views over every trainable tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("wte".to_string(), &self.wte),
            ("wpe".to_string(), &self.wpe),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &layer.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &layer.ln1_b));
            out.push((format!("layer{i}.w_qkv"), &layer.w_qkv));
            out.push((format!("layer{i}.b_qkv"), &layer.b_qkv));
            out.push((format!("layer{i}.w_attn_proj"), &layer.w_attn_proj));
            out.push((format!("layer{i}.b_attn_proj"), &layer.b_attn_proj));
            out.push((format!("layer{i}.ln2_g"), &layer.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &layer.ln2_b));
            out.push((format!("layer{i}.w_fc"), &layer.w_fc));
            out.push((format!("layer{i}.b_fc"), &layer.b_fc));
            out.push((format!("layer{i}.w_fc_proj"), &layer.w_fc_proj));
            out.push((format!("layer{i}.b_fc_proj"), &layer.b_fc_proj));
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("wte".to_string(), &mut self.wte),
            ("wpe".to_string(), &mut self.wpe),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1_g"), &mut layer.ln1_g));
            out.push((format!("layer{i}.ln1_b"), &mut layer.ln1_b));
            out.push((format!("layer{i}.w_qkv"), &mut layer.w_qkv));
            out.push((format!("layer{i}.b_qkv"), &mut layer.b_qkv));
            out.push((format!("layer{i}.w_attn_proj"), &mut layer.w_attn_proj));
            out.push((format!("layer{i}.b_attn_proj"), &mut layer.b_attn_proj));
            out.push((format!("layer{i}.ln2_g"), &mut layer.ln2_g));
            out.push((format!("layer{i}.ln2_b"), &mut layer.ln2_b));
            out.push((format!("layer{i}.w_fc"), &mut layer.w_fc));
            out.push((format!("layer{i}.b_fc"), &mut layer.b_fc));
            out.push((format!("layer{i}.w_fc_proj"), &mut layer.w_fc_proj));
            out.push((format!("layer{i}.b_fc_proj"), &mut layer.b_fc_proj));
        }
        out.push(("lnf_g".to_string(), &mut self.lnf_g));
        out.push(("lnf_b".to_string(), &mut self.lnf_b));
        out.push(("head_w".to_string(), &mut self.head_w));
        out.push(("head_b".to_string(), &mut self.head_b));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// out[m, n] = a[m, k] · w[k, n] + bias[n]
fn matmul_bias(out: &mut [f64], a: &[f64], w: &[f64], bias: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.copy_from_slice(&bias[..n]);
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let wrow = &w[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * wrow[j];
            }
        }
    }
}

/// Backward of `matmul_bias`: accumulates into da, dw, dbias.
fn matmul_bias_backward(
    dout: &[f64],
    a: &[f64],
    w: &[f64],
    da: &mut [f64],
    dw: &mut [f64],
    dbias: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let drow = &dout[i * n..(i + 1) * n];
        for j in 0..n {
            dbias[j] += drow[j];
        }
        for p in 0..k {
            let wrow = &w[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += drow[j] * wrow[j];
            }
            da[i * k + p] += acc;
            let av = a[i * k + p];
            if av != 0.0 {
                let dwrow = &mut dw[p * n..(p + 1) * n];
                for j in 0..n {
                    dwrow[j] += av * drow[j];
                }
            }
        }
    }
}

struct LnCache {
    mean: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], t: usize, d: usize) -> LnCache {
    let mut mean = vec![0.0; t];
    let mut rstd = vec![0.0; t];
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let m: f64 = row.iter().sum::<f64>() / d as f64;
        let var: f64 = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        mean[i] = m;
        rstd[i] = r;
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - m) * r * g[j] + b[j];
        }
    }
    LnCache { mean, rstd, out }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dout: &[f64],
    x: &[f64],
    cache: &LnCache,
    g: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    t: usize,
    d: usize,
) {
    for i in 0..t {
        let xrow = &x[i * d..(i + 1) * d];
        let drow = &dout[i * d..(i + 1) * d];
        let m = cache.mean[i];
        let r = cache.rstd[i];
        let mut dnorm_mean = 0.0;
        let mut dnorm_xhat_mean = 0.0;
        for j in 0..d {
            let xhat = (xrow[j] - m) * r;
            let dnorm = drow[j] * g[j];
            dnorm_mean += dnorm;
            dnorm_xhat_mean += dnorm * xhat;
            dg[j] += drow[j] * xhat;
            db[j] += drow[j];
        }
        dnorm_mean /= d as f64;
        dnorm_xhat_mean /= d as f64;
        let dxrow = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let xhat = (xrow[j] - m) * r;
            let dnorm = drow[j] * g[j];
            dxrow[j] += (dnorm - dnorm_mean - xhat * dnorm_xhat_mean) * r;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LayerCache {
    /// Residual-stream input to the layer, [t, d].
    x_in: Vec<f64>,
    ln1: LnCache,
    /// [t, 3d]
    qkv: Vec<f64>,
    /// Attention probabilities, [n_heads, t, t] flattened.
    probs: Vec<f64>,
    /// Concatenated per-head attention output, [t, d].
    att_concat: Vec<f64>,
    /// After attention residual add, [t, d].
    res1: Vec<f64>,
    ln2: LnCache,
    /// [t, d_ff] before the nonlinearity.
    fc_pre: Vec<f64>,
    /// [t, d_ff] after GELU.
    fc_act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    /// Residual stream after the last layer, [t, d].
    x_final: Vec<f64>,
    lnf: LnCache,
}

/// Truncate to the model's context window, keeping the most recent tokens.
fn truncate_context<'a>(tokens: &'a [u32], max_len: usize) -> &'a [u32] {
    &tokens[tokens.len().saturating_sub(max_len)..]
}

pub(crate) fn forward_cached(
    params: &EstimatorParams,
    tokens: &[u32],
) -> Result<(f64, ForwardCache), EstimatorError> {
    if tokens.is_empty() {
        return Err(EstimatorError::EmptyPrompt);
    }
    let config = &params.config;
    let tokens = truncate_context(tokens, config.max_len);
    for &id in tokens {
        if id as usize >= config.vocab_size {
            return Err(EstimatorError::TokenOutOfRange {
                id,
                vocab_size: config.vocab_size,
            });
        }
    }
    let (t, d, nh) = (tokens.len(), config.d_model, config.n_heads);
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0; t * d];
    for (i, &id) in tokens.iter().enumerate() {
        let te = &params.wte[id as usize * d..(id as usize + 1) * d];
        let pe = &params.wpe[i * d..(i + 1) * d];
        let row = &mut x[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(config.n_layers);
    for layer in &params.layers {
        let x_in = x;
        let ln1 = layer_norm(&x_in, &layer.ln1_g, &layer.ln1_b, t, d);

        let mut qkv = vec![0.0; t * 3 * d];
        matmul_bias(&mut qkv, &ln1.out, &layer.w_qkv, &layer.b_qkv, t, d, 3 * d);

        // Causal multi-head attention.
        let mut probs = vec![0.0; nh * t * t];
        let mut att_concat = vec![0.0; t * d];
        for h in 0..nh {
            let qo = h * hd;
            let ko = d + h * hd;
            let vo = 2 * d + h * hd;
            for i in 0..t {
                let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                let prow = &mut probs[h * t * t + i * t..h * t * t + i * t + t];
                let mut max_score = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[c] * k[c];
                    }
                    let s = s * scale;
                    prow[j] = s;
                    if s > max_score {
                        max_score = s;
                    }
                }
                let mut denom = 0.0;
                for j in 0..=i {
                    prow[j] = (prow[j] - max_score).exp();
                    denom += prow[j];
                }
                for j in 0..=i {
                    prow[j] /= denom;
                }
                let orow = &mut att_concat[i * d + qo..i * d + qo + hd];
                for j in 0..=i {
                    let v = &qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    let p = prow[j];
                    for c in 0..hd {
                        orow[c] += p * v[c];
                    }
                }
            }
        }

        let mut proj = vec![0.0; t * d];
        matmul_bias(
            &mut proj,
            &att_concat,
            &layer.w_attn_proj,
            &layer.b_attn_proj,
            t,
            d,
            d,
        );
        let mut res1 = x_in.clone();
        for (r, p) in res1.iter_mut().zip(proj.iter()) {
            *r += p;
        }

        let ln2 = layer_norm(&res1, &layer.ln2_g, &layer.ln2_b, t, d);
        let mut fc_pre = vec![0.0; t * config.d_ff];
        matmul_bias(&mut fc_pre, &ln2.out, &layer.w_fc, &layer.b_fc, t, d, config.d_ff);
        let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
        let mut mlp = vec![0.0; t * d];
        matmul_bias(
            &mut mlp,
            &fc_act,
            &layer.w_fc_proj,
            &layer.b_fc_proj,
            t,
            config.d_ff,
            d,
        );
        let mut res2 = res1.clone();
        for (r, m) in res2.iter_mut().zip(mlp.iter()) {
            *r += m;
        }

        layers.push(LayerCache {
            x_in,
            ln1,
            qkv,
            probs,
            att_concat,
            res1,
            ln2,
            fc_pre,
            fc_act,
        });
        x = res2;
    }

    let lnf = layer_norm(&x, &params.lnf_g, &params.lnf_b, t, d);
    let last = &lnf.out[(t - 1) * d..t * d];
    let mut y = params.head_b[0];
    for j in 0..d {
        y += params.head_w[j] * last[j];
    }
    Ok((
        y,
        ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
            lnf,
        },
    ))
}

/// Raw (unclamped) head output; the training-time view of the model.
pub fn forward_unclamped(params: &EstimatorParams, tokens: &[u32]) -> Result<f64, EstimatorError> {
    forward_cached(params, tokens).map(|(y, _)| y)
}

/// Inference-time score, clamped to `[0, 1]`.
pub fn forward(params: &EstimatorParams, tokens: &[u32]) -> Result<f64, EstimatorError> {
    forward_unclamped(params, tokens).map(|y| y.clamp(0.0, 1.0))
}

/// Accumulate gradients of `dy * d(head output)/d(params)` into `grads`.
pub(crate) fn backward(
    params: &EstimatorParams,
    cache: &ForwardCache,
    dy: f64,
    grads: &mut EstimatorParams,
) {
    let config = &params.config;
    let (t, d, nh) = (cache.tokens.len(), config.d_model, config.n_heads);
    let hd = d / nh;
    let scale = 1.0 / (hd as f64).sqrt();

    // Head: y = head_w . lnf_out[t-1] + head_b
    let mut dlnf_out = vec![0.0; t * d];
    {
        let last = &cache.lnf.out[(t - 1) * d..t * d];
        for j in 0..d {
            grads.head_w[j] += dy * last[j];
            dlnf_out[(t - 1) * d + j] = dy * params.head_w[j];
        }
        grads.head_b[0] += dy;
    }

    let mut dx = vec![0.0; t * d];
    layer_norm_backward(
        &dlnf_out,
        &cache.x_final,
        &cache.lnf,
        &params.lnf_g,
        &mut dx,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
        t,
        d,
    );

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let cache_l = &cache.layers[li];
        let glayer = &mut grads.layers[li];
        // dx is the gradient w.r.t. res2 = res1 + mlp(ln2(res1)).
        let dres2 = dx;

        // MLP path.
        let mut dfc_act = vec![0.0; t * config.d_ff];
        matmul_bias_backward(
            &dres2,
            &cache_l.fc_act,
            &layer.w_fc_proj,
            &mut dfc_act,
            &mut glayer.w_fc_proj,
            &mut glayer.b_fc_proj,
            t,
            config.d_ff,
            d,
        );
        let mut dfc_pre = vec![0.0; t * config.d_ff];
        for i in 0..t * config.d_ff {
            dfc_pre[i] = dfc_act[i] * gelu_grad(cache_l.fc_pre[i]);
        }
        let mut dln2_out = vec![0.0; t * d];
        matmul_bias_backward(
            &dfc_pre,
            &cache_l.ln2.out,
            &layer.w_fc,
            &mut dln2_out,
            &mut glayer.w_fc,
            &mut glayer.b_fc,
            t,
            d,
            config.d_ff,
        );
        // Residual: gradient w.r.t. res1 gets both branches.
        let mut dres1 = dres2;
        layer_norm_backward(
            &dln2_out,
            &cache_l.res1,
            &cache_l.ln2,
            &layer.ln2_g,
            &mut dres1,
            &mut glayer.ln2_g,
            &mut glayer.ln2_b,
            t,
            d,
        );

        // Attention path.
        let mut datt_concat = vec![0.0; t * d];
        matmul_bias_backward(
            &dres1,
            &cache_l.att_concat,
            &layer.w_attn_proj,
            &mut datt_concat,
            &mut glayer.w_attn_proj,
            &mut glayer.b_attn_proj,
            t,
            d,
            d,
        );

        let mut dqkv = vec![0.0; t * 3 * d];
        for h in 0..nh {
            let qo = h * hd;
            let ko = d + h * hd;
            let vo = 2 * d + h * hd;
            for i in 0..t {
                let prow = &cache_l.probs[h * t * t + i * t..h * t * t + i * t + t];
                let dorow = &datt_concat[i * d + qo..i * d + qo + hd];
                // dprobs and dV.
                let mut dprow = vec![0.0; i + 1];
                for j in 0..=i {
                    let v = &cache_l.qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += dorow[c] * v[c];
                    }
                    dprow[j] = acc;
                    let dv = &mut dqkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                    let p = prow[j];
                    for c in 0..hd {
                        dv[c] += p * dorow[c];
                    }
                }
                // Softmax backward.
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += prow[j] * dprow[j];
                }
                let q = &cache_l.qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                let mut dq = vec![0.0; hd];
                for j in 0..=i {
                    let dscore = prow[j] * (dprow[j] - dot) * scale;
                    if dscore == 0.0 {
                        continue;
                    }
                    let k = &cache_l.qkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                    let dk = &mut dqkv[j * 3 * d + ko..j * 3 * d + ko + hd];
                    for c in 0..hd {
                        dq[c] += dscore * k[c];
                        dk[c] += dscore * q[c];
                    }
                }
                let dqrow = &mut dqkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                for c in 0..hd {
                    dqrow[c] += dq[c];
                }
            }
        }

        let mut dln1_out = vec![0.0; t * d];
        matmul_bias_backward(
            &dqkv,
            &cache_l.ln1.out,
            &layer.w_qkv,
            &mut dln1_out,
            &mut glayer.w_qkv,
            &mut glayer.b_qkv,
            t,
            d,
            3 * d,
        );
        // Residual: gradient w.r.t. x_in gets the passthrough too.
        let mut dx_in = dres1;
        layer_norm_backward(
            &dln1_out,
            &cache_l.x_in,
            &cache_l.ln1,
            &layer.ln1_g,
            &mut dx_in,
            &mut glayer.ln1_g,
            &mut glayer.ln1_b,
            t,
            d,
        );
        dx = dx_in;
    }

    // Embeddings.
    for (i, &id) in cache.tokens.iter().enumerate() {
        let drow = &dx[i * d..(i + 1) * d];
        let wte_row = &mut grads.wte[id as usize * d..(id as usize + 1) * d];
        let wpe_row = &mut grads.wpe[i * d..(i + 1) * d];
        for j in 0..d {
            wte_row[j] += drow[j];
            wpe_row[j] += drow[j];
        }
    }
}
