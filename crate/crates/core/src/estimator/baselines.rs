//! Rule-based baseline estimators and the common scoring interface.
//!
//! RAND is the control group (a deterministic hash-based uniform draw per
//! prompt), CC scores prompts by lexical McCabe cyclomatic complexity, and
//! COC by character count. CC and COC produce unbounded values and are
//! rescaled over the whole evaluated set before thresholding.

use crate::corpus::Language;
use crate::tokenizer::BpeVocab;

use super::{forward, EstimatorError, EstimatorParams};

/// A completion-quality estimator over prompt text.
pub trait Scorer: Send + Sync {
    fn id(&self) -> String;
    fn score(&self, prompt: &str) -> Result<f64, EstimatorError>;
    /// True for estimators whose raw scores must be divided by the maximum
    /// over the evaluated set before comparison against a threshold.
    fn needs_rescale(&self) -> bool {
        false
    }
}

/// The trained Transformer estimator behind the [`Scorer`] interface.
pub struct TcqeScorer {
    params: EstimatorParams,
    vocab: BpeVocab,
    id: String,
}

impl TcqeScorer {
    pub fn new(params: EstimatorParams, vocab: BpeVocab, id: impl Into<String>) -> Self {
        TcqeScorer {
            params,
            vocab,
            id: id.into(),
        }
    }

    pub fn params(&self) -> &EstimatorParams {
        &self.params
    }
}

impl Scorer for TcqeScorer {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn score(&self, prompt: &str) -> Result<f64, EstimatorError> {
        forward(&self.params, &self.vocab.encode(prompt))
    }
}

/// Uniform score in `[0, 1)` from a seeded hash of the prompt: the same
/// prompt always draws the same value, distinct prompts are effectively
/// independent.
pub struct RandScorer {
    seed: u64,
}

pub fn baseline_rand(seed: u64) -> RandScorer {
    RandScorer { seed }
}

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    // Final avalanche so nearby prompts do not draw nearby scores.
    let mut x = hash;
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

impl Scorer for RandScorer {
    fn id(&self) -> String {
        "rand".to_string()
    }

    fn score(&self, prompt: &str) -> Result<f64, EstimatorError> {
        let bits = fnv1a64(self.seed, prompt.as_bytes());
        Ok((bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
    }
}

/// Characters-of-code estimator.
pub struct CocScorer;

pub fn baseline_coc() -> CocScorer {
    CocScorer
}

impl Scorer for CocScorer {
    fn id(&self) -> String {
        "coc".to_string()
    }

    fn score(&self, prompt: &str) -> Result<f64, EstimatorError> {
        Ok(prompt.chars().count() as f64)
    }

    fn needs_rescale(&self) -> bool {
        true
    }
}

/// Lexical McCabe cyclomatic complexity: 1 plus the number of decision
/// points, counted outside string literals and comments. A lexical count is
/// language-portable and equals e - n + 2 on the control-flow graph of
/// structured code.
pub struct CcScorer {
    language: Language,
}

pub fn baseline_cc(language: Language) -> CcScorer {
    CcScorer { language }
}

fn keywords_for(language: &Language) -> &'static [&'static str] {
    match language {
        Language::Python => &["if", "elif", "for", "while", "except", "and", "or"],
        // Java keyword set doubles as the default for unknown languages.
        _ => &["if", "for", "while", "case", "catch"],
    }
}

fn count_word(text: &str, word: &str) -> usize {
    let is_ident = |c: char| c.is_alphanumeric() || c == '_';
    let mut count = 0;
    let mut rest = text;
    let mut offset = 0;
    while let Some(pos) = rest.find(word) {
        let start = offset + pos;
        let end = start + word.len();
        let before_ok = text[..start].chars().next_back().map_or(true, |c| !is_ident(c));
        let after_ok = text[end..].chars().next().map_or(true, |c| !is_ident(c));
        if before_ok && after_ok {
            count += 1;
        }
        rest = &rest[pos + word.len()..];
        offset = end;
    }
    count
}

impl Scorer for CcScorer {
    fn id(&self) -> String {
        "cc".to_string()
    }

    fn score(&self, prompt: &str) -> Result<f64, EstimatorError> {
        let code = crate::textscan::strip_code(prompt, &self.language).code;
        let mut decision_points = 0usize;
        for kw in keywords_for(&self.language) {
            decision_points += count_word(&code, kw);
        }
        if !matches!(self.language, Language::Python) {
            decision_points += code.matches("&&").count();
            decision_points += code.matches("||").count();
            // Ternary conditionals; wildcards in generics inflate this, an
            // accepted cost of staying lexical.
            decision_points += code.matches('?').count();
        }
        Ok(1.0 + decision_points as f64)
    }

    fn needs_rescale(&self) -> bool {
        true
    }
}

/// Scores after division by the set-wide maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledScores {
    pub values: Vec<f64>,
    /// Set when every input was zero and no rescaling was possible.
    pub all_zero: bool,
}

/// Rescale raw scores into `[0, 1]` by dividing by the maximum over the
/// whole evaluated set; the maximum maps to exactly 1.
pub fn rescale_scores(scores: &[f64]) -> RescaledScores {
    debug_assert!(scores.iter().all(|s| *s >= 0.0));
    let max = scores.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return RescaledScores {
            values: vec![0.0; scores.len()],
            all_zero: true,
        };
    }
    RescaledScores {
        values: scores.iter().map(|s| s / max).collect(),
        all_zero: false,
    }
}
