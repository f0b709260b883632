//! Exact Shapley attribution over the four binary prompt-pattern features,
//! plus the simple classifier it explains.
//!
//! With four features the 2^4 coalition lattice is enumerated outright, so
//! the attribution is exact: no sampling, no approximation. The coalition
//! value v(S) is the interventional expectation over a background dataset,
//! with features in S taken from the explained instance and the rest from
//! the background row.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::patterns::PatternFeatures;
use super::EvalError;

const M: usize = 4;

/// A linear model over the four pattern bits scoring in log-odds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternClassifier {
    pub weights: [f64; 4],
    pub bias: f64,
}

impl PatternClassifier {
    /// Raw margin (log-odds of the positive group).
    pub fn log_odds(&self, x: &PatternFeatures) -> f64 {
        let bits = x.as_f64();
        let mut y = self.bias;
        for i in 0..M {
            y += self.weights[i] * bits[i];
        }
        y
    }

    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for w in self.weights {
            hasher.update(w.to_le_bytes());
        }
        hasher.update(self.bias.to_le_bytes());
        format!("{:x}", hasher.finalize())[..16].to_string()
    }
}

/// Fit a logistic model by full-batch gradient descent with a small L2
/// penalty on the weights. Zero init and a fixed schedule make the fit
/// deterministic; the penalty keeps separable fits finite and ties between
/// duplicate features exact.
pub fn train_pattern_classifier(
    rows: &[(PatternFeatures, bool)],
) -> Result<PatternClassifier, EvalError> {
    let positives = rows.iter().filter(|(_, label)| *label).count();
    if rows.is_empty() || positives == 0 || positives == rows.len() {
        return Err(EvalError::SingleClass);
    }

    const LR: f64 = 0.5;
    const ITERS: usize = 3000;
    const L2: f64 = 1e-3;
    let n = rows.len() as f64;
    let mut w = [0.0f64; M];
    let mut b = 0.0f64;
    for _ in 0..ITERS {
        let mut gw = [0.0f64; M];
        let mut gb = 0.0f64;
        for (x, label) in rows {
            let bits = x.as_f64();
            let mut z = b;
            for i in 0..M {
                z += w[i] * bits[i];
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - (*label as u8 as f64);
            for i in 0..M {
                gw[i] += err * bits[i];
            }
            gb += err;
        }
        for i in 0..M {
            w[i] -= LR * (gw[i] / n + L2 * w[i]);
        }
        b -= LR * gb / n;
    }
    Ok(PatternClassifier { weights: w, bias: b })
}

/// Per-feature Shapley values for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// One value per pattern, in [`super::patterns::PATTERN_NAMES`] order.
    pub values: [f64; 4],
    /// v(empty coalition): the mean model output over the background.
    pub base_value: f64,
    pub model_fingerprint: String,
}

impl AttributionResult {
    /// base + sum of values; equals the model output on the instance.
    pub fn reconstructed_output(&self) -> f64 {
        self.base_value + self.values.iter().sum::<f64>()
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Exact Shapley values by enumerating all coalitions of the four features.
///
/// Per-feature terms are summed in a value-sorted order so that symmetric
/// features receive bit-identical values regardless of their index.
pub fn shapley_exact<F>(
    f: F,
    x: &PatternFeatures,
    background: &[PatternFeatures],
    model_fingerprint: impl Into<String>,
) -> Result<AttributionResult, EvalError>
where
    F: Fn(&PatternFeatures) -> f64,
{
    if background.is_empty() {
        return Err(EvalError::EmptyBackground);
    }

    // v(S) for every coalition mask.
    let mut v = [0.0f64; 1 << M];
    for (mask, value) in v.iter_mut().enumerate() {
        let mut sum = 0.0;
        for row in background {
            let mut bits = [false; M];
            for i in 0..M {
                bits[i] = if mask & (1 << i) != 0 { x.bit(i) } else { row.bit(i) };
            }
            sum += f(&PatternFeatures::from_bits(bits));
        }
        *value = sum / background.len() as f64;
    }

    let m_fact = factorial(M);
    let mut values = [0.0f64; M];
    for (i, value) in values.iter_mut().enumerate() {
        let mut terms: Vec<f64> = Vec::with_capacity(1 << (M - 1));
        for mask in 0..(1usize << M) {
            if mask & (1 << i) != 0 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            let weight = factorial(s) * factorial(M - s - 1) / m_fact;
            terms.push(weight * (v[mask | (1 << i)] - v[mask]));
        }
        terms.sort_by(f64::total_cmp);
        *value = terms.iter().sum();
    }

    Ok(AttributionResult {
        values,
        base_value: v[0],
        model_fingerprint: model_fingerprint.into(),
    })
}
