//! Evaluation harness: threshold sweeps over estimators, prompt-pattern
//! statistics, exact Shapley attribution, and the sampling formula used to
//! size review groups.

mod patterns;
mod shapley;

pub use patterns::{extract_pattern_features, PatternConfig, PatternFeatures, PATTERN_NAMES};
pub use shapley::{
    shapley_exact, train_pattern_classifier, AttributionResult, PatternClassifier,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimator::{rescale_scores, Scorer};
use crate::metrics::{acc_at_t, AccAtT, Metric};
use crate::oracle::LabeledExample;
use crate::tokenizer::BpeVocab;

/// The standard sweep grid.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation requires a non-empty labeled test set")]
    EmptyTestSet,
    #[error("classifier training requires both group labels")]
    SingleClass,
    #[error("shapley attribution requires a non-empty background dataset")]
    EmptyBackground,
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
}

/// One estimator's sweep results across every threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub estimator: String,
    /// Whether raw scores were rescaled by the set maximum first.
    pub rescaled: bool,
    /// Set when rescaling was requested but every raw score was zero.
    pub all_zero_scores: bool,
    pub cells: Vec<AccAtT>,
}

/// The estimator-by-threshold accuracy grid plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub thresholds: Vec<f64>,
    pub rows: Vec<EvalRow>,
    pub n_examples: usize,
    pub dataset_fingerprint: String,
}

fn dataset_fingerprint(labeled: &[LabeledExample]) -> String {
    let mut hasher = Sha256::new();
    for example in labeled {
        for id in &example.prompt_tokens {
            hasher.update(id.to_le_bytes());
        }
        hasher.update(example.score.value.to_le_bytes());
        hasher.update([example.was_null_ground_truth as u8]);
    }
    format!("{:x}", hasher.finalize())[..16].to_string()
}

/// Run every estimator over the labeled test set and tabulate Acc@t and the
/// rejection count at each threshold. Estimators that score on an unbounded
/// scale (CC, COC) are rescaled over the whole test set first.
pub fn threshold_sweep(
    estimators: &[&dyn Scorer],
    labeled: &[LabeledExample],
    vocab: &BpeVocab,
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    if labeled.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut thresholds: Vec<f64> = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);

    let prompts: Vec<String> = labeled
        .par_iter()
        .map(|e| vocab.decode(&e.prompt_tokens))
        .collect::<Result<_, _>>()?;
    let actuals: Vec<f64> = labeled.iter().map(|e| e.score.value).collect();
    let metric = labeled[0].score.metric;

    let mut rows = Vec::with_capacity(estimators.len());
    for estimator in estimators {
        let raw: Vec<f64> = prompts
            .par_iter()
            .map(|p| estimator.score(p))
            .collect::<Result<_, _>>()?;
        let (scores, all_zero) = if estimator.needs_rescale() {
            let rescaled = rescale_scores(&raw);
            (rescaled.values, rescaled.all_zero)
        } else {
            (raw, false)
        };
        let pairs: Vec<(f64, f64)> = scores.into_iter().zip(actuals.iter().copied()).collect();
        let cells = thresholds.iter().map(|&t| acc_at_t(&pairs, t)).collect();
        rows.push(EvalRow {
            estimator: estimator.id(),
            rescaled: estimator.needs_rescale(),
            all_zero_scores: all_zero,
            cells,
        });
    }

    Ok(EvalReport {
        metric,
        thresholds,
        rows,
        n_examples: labeled.len(),
        dataset_fingerprint: dataset_fingerprint(labeled),
    })
}

impl EvalReport {
    /// Flat CSV: one line per (estimator, threshold) cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,metric,threshold,acc_at_t,n_rejected,empty\n");
        for row in &self.rows {
            for (t, cell) in self.thresholds.iter().zip(&row.cells) {
                out.push_str(&format!(
                    "{},{},{},{:.6},{},{}\n",
                    row.estimator,
                    self.metric.as_str(),
                    t,
                    cell.accuracy,
                    cell.n_rejected,
                    cell.empty
                ));
            }
        }
        out
    }

    /// Terminal grid: estimators down, thresholds across, `Acc@t / rejected`
    /// per cell.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "metric: {}   examples: {}   dataset: {}\n",
            self.metric.as_str(),
            self.n_examples,
            self.dataset_fingerprint
        ));
        out.push_str(&format!("{:<12}", "estimator"));
        for t in &self.thresholds {
            out.push_str(&format!("{:>18}", format!("t={t}")));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{:<12}", row.estimator));
            for cell in &row.cells {
                let shown = if cell.empty {
                    "-- / 0".to_string()
                } else {
                    format!("{:5.1}% / {}", cell.accuracy * 100.0, cell.n_rejected)
                };
                out.push_str(&format!("{shown:>18}"));
            }
            out.push('\n');
        }
        out
    }

    /// Acc@t cell for a named estimator at a threshold, if present.
    pub fn cell(&self, estimator: &str, threshold: f64) -> Option<&AccAtT> {
        let row = self.rows.iter().find(|r| r.estimator == estimator)?;
        let idx = self.thresholds.iter().position(|t| *t == threshold)?;
        row.cells.get(idx)
    }
}

/// Review-group size for a given Z-score, population proportion, margin of
/// error, and finite population: the standard sample-size formula with
/// finite-population correction, rounded to the nearest integer.
pub fn sample_size(z: f64, p: f64, c: f64, population: u64) -> u64 {
    debug_assert!(p > 0.0 && p < 1.0 && c > 0.0 && population >= 1);
    let ss0 = z * z * p * (1.0 - p) / (c * c);
    let corrected = ss0 / (1.0 + (ss0 - 1.0) / population as f64);
    (corrected.round() as u64).clamp(1, population)
}

/// How a pattern shifts mean estimation scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum ScoreGap {
    /// Relative drop of the with-pattern mean versus the without-pattern
    /// mean; negative values are increases.
    Drop(f64),
    /// The with-pattern mean collapsed to zero against a nonzero baseline.
    InfiniteDrop,
    /// One side is empty or the baseline mean is zero.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternGap {
    pub pattern: String,
    pub n_with: usize,
    pub n_without: usize,
    pub mean_with: Option<f64>,
    pub mean_without: Option<f64>,
    pub gap: ScoreGap,
}

/// Per-pattern mean-score gap between prompts following and not following
/// each pattern.
pub fn score_gap_report(features: &[PatternFeatures], scores: &[f64]) -> Vec<PatternGap> {
    assert_eq!(features.len(), scores.len(), "paired inputs required");
    let mut out = Vec::with_capacity(4);
    for (i, name) in PATTERN_NAMES.iter().enumerate() {
        let (mut with_sum, mut with_n) = (0.0, 0usize);
        let (mut without_sum, mut without_n) = (0.0, 0usize);
        for (f, &s) in features.iter().zip(scores) {
            if f.bit(i) {
                with_sum += s;
                with_n += 1;
            } else {
                without_sum += s;
                without_n += 1;
            }
        }
        let mean_with = (with_n > 0).then(|| with_sum / with_n as f64);
        let mean_without = (without_n > 0).then(|| without_sum / without_n as f64);
        let gap = match (mean_with, mean_without) {
            (Some(w), Some(wo)) if w == 0.0 && wo > 0.0 => ScoreGap::InfiniteDrop,
            (Some(_), Some(wo)) if wo == 0.0 => ScoreGap::Undefined,
            (Some(w), Some(wo)) => ScoreGap::Drop((wo - w) / wo),
            _ => ScoreGap::Undefined,
        };
        out.push(PatternGap {
            pattern: name.to_string(),
            n_with: with_n,
            n_without: without_n,
            mean_with,
            mean_without,
            gap,
        });
    }
    out
}

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| < 1.5e-7.
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoProportionTest {
    pub z: f64,
    /// One-sided p-value for "proportion 1 exceeds proportion 2".
    pub p_value: f64,
}

/// Pooled two-proportion z-test, one-sided (greater).
pub fn two_proportion_greater(
    successes1: usize,
    n1: usize,
    successes2: usize,
    n2: usize,
) -> TwoProportionTest {
    assert!(n1 > 0 && n2 > 0, "both samples must be non-empty");
    let p1 = successes1 as f64 / n1 as f64;
    let p2 = successes2 as f64 / n2 as f64;
    let pooled = (successes1 + successes2) as f64 / (n1 + n2) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        // Degenerate pools (all successes or all failures) carry no evidence.
        return TwoProportionTest { z: 0.0, p_value: 0.5 };
    }
    let z = (p1 - p2) / se;
    TwoProportionTest {
        z,
        p_value: 1.0 - normal_cdf(z),
    }
}
