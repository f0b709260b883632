//! Stand-ins for the target completion model.
//!
//! Labeling a dataset means asking a completion model to finish every prompt
//! and scoring the result against the ground truth. Two oracles are
//! provided: a deterministic order-N count model with greedy decoding
//! (desk-scale, reproducible labels) and a client for an external HTTP
//! completion service. Pairs whose ground truth is empty are scored 0
//! without consulting the oracle at all: a finished prompt has nothing worth
//! completing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PromptPair;
use crate::metrics::{bleu, crystal_bleu, Metric, QualityScore, TrivialNgramSet, MAX_ORDER};
use crate::tokenizer::{BpeVocab, TokenizerError, EOS_ID};

/// Selects and parameterizes a completion oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub kind: OracleKind,
    /// Prompts are truncated to their last this-many tokens before the call.
    pub max_input_tokens: usize,
    /// Upper bound on generated tokens per completion.
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OracleKind {
    NgramReference {
        order: usize,
    },
    ExternalHttp {
        endpoint: String,
        /// Environment variable holding the bearer token, if any.
        auth_env: Option<String>,
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
}

fn default_retries() -> u32 {
    3
}

fn default_in_flight() -> usize {
    8
}

impl OracleConfig {
    pub fn ngram(order: usize) -> Self {
        OracleConfig {
            kind: OracleKind::NgramReference { order },
            max_input_tokens: 256,
            max_new_tokens: 10,
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.max_input_tokens == 0 || self.max_new_tokens == 0 {
            return Err(OracleError::InvalidConfig(
                "token limits must be at least 1".to_string(),
            ));
        }
        if let OracleKind::NgramReference { order } = self.kind {
            if order == 0 {
                return Err(OracleError::InvalidConfig("n-gram order must be at least 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle config: {0}")]
    InvalidConfig(String),
    #[error("n-gram model trained on an empty corpus")]
    EmptyModel,
    #[error("external completion request failed after {attempts} attempts: {reason}")]
    External { attempts: u32, reason: String },
    #[error("crystal_bleu labeling requires a trivial n-gram set")]
    MissingTrivialSet,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("labeled dataset record {ordinal} is malformed: {reason}")]
    Record { ordinal: usize, reason: String },
}

/// An order-N count model over token sequences with an EOS sentinel.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    /// tables[len] maps a context of `len` tokens to continuation counts.
    tables: Vec<HashMap<Box<[u32]>, HashMap<u32, u64>>>,
}

impl NgramModel {
    /// Count continuations for every context length up to `order - 1`. An
    /// EOS token is appended to each sequence so the model can stop early.
    pub fn train(corpus_tokens: &[Vec<u32>], order: usize) -> Result<Self, OracleError> {
        if order == 0 {
            return Err(OracleError::InvalidConfig("n-gram order must be at least 1".into()));
        }
        let mut tables: Vec<HashMap<Box<[u32]>, HashMap<u32, u64>>> =
            (0..order).map(|_| HashMap::new()).collect();
        for seq in corpus_tokens {
            let mut extended = seq.clone();
            extended.push(EOS_ID);
            for i in 0..extended.len() {
                for len in 0..=i.min(order - 1) {
                    let ctx = &extended[i - len..i];
                    *tables[len]
                        .entry(ctx.into())
                        .or_default()
                        .entry(extended[i])
                        .or_insert(0) += 1;
                }
            }
        }
        if tables[0].is_empty() {
            return Err(OracleError::EmptyModel);
        }
        Ok(NgramModel { order, tables })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Highest-count continuation of the longest matching context suffix,
    /// backing off one token at a time down to the unigram table. Ties break
    /// toward the lowest token id.
    fn next_token(&self, context: &[u32]) -> Option<u32> {
        let max_len = context.len().min(self.order - 1);
        for len in (0..=max_len).rev() {
            let ctx = &context[context.len() - len..];
            if let Some(continuations) = self.tables[len].get(ctx) {
                let best = continuations
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                    .map(|(&id, _)| id);
                if best.is_some() {
                    return best;
                }
            }
        }
        None
    }
}

/// Anything that can finish a truncated prompt.
pub trait CompletionOracle: Sync {
    /// Complete an already-truncated prompt with at most `max_new_tokens`
    /// tokens.
    fn complete_truncated(&self, prompt_tokens: &[u32]) -> Result<Vec<u32>, OracleError>;

    fn max_input_tokens(&self) -> usize;
    fn max_new_tokens(&self) -> usize;

    /// Upper bound on concurrent in-flight completions during labeling.
    fn max_in_flight(&self) -> usize {
        8
    }

    /// Truncate to the last `max_input_tokens` tokens, then complete.
    fn complete(&self, prompt_tokens: &[u32]) -> Result<Vec<u32>, OracleError> {
        let keep = prompt_tokens.len().min(self.max_input_tokens());
        let truncated = &prompt_tokens[prompt_tokens.len() - keep..];
        let mut out = self.complete_truncated(truncated)?;
        out.truncate(self.max_new_tokens());
        Ok(out)
    }
}

/// Greedy decoding from an [`NgramModel`] under the configured token limits.
pub struct NgramOracle {
    model: NgramModel,
    max_input_tokens: usize,
    max_new_tokens: usize,
}

impl NgramOracle {
    pub fn new(model: NgramModel, config: &OracleConfig) -> Result<Self, OracleError> {
        config.validate()?;
        Ok(NgramOracle {
            model,
            max_input_tokens: config.max_input_tokens,
            max_new_tokens: config.max_new_tokens,
        })
    }
}

impl CompletionOracle for NgramOracle {
    fn complete_truncated(&self, prompt_tokens: &[u32]) -> Result<Vec<u32>, OracleError> {
        let mut context: Vec<u32> = prompt_tokens.to_vec();
        let mut generated = Vec::new();
        while generated.len() < self.max_new_tokens {
            match self.model.next_token(&context) {
                Some(EOS_ID) | None => break,
                Some(id) => {
                    generated.push(id);
                    context.push(id);
                }
            }
        }
        Ok(generated)
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct CompletionResponse {
    completion: String,
}

/// Client for an external completion service speaking a single JSON POST:
/// `{"prompt": ..., "max_tokens": ...}` in, `{"completion": ...}` out.
pub struct HttpOracle {
    endpoint: String,
    client: reqwest::blocking::Client,
    auth_token: Option<String>,
    max_retries: u32,
    max_in_flight: usize,
    max_input_tokens: usize,
    max_new_tokens: usize,
    vocab: BpeVocab,
}

impl HttpOracle {
    pub fn new(config: &OracleConfig, vocab: BpeVocab) -> Result<Self, OracleError> {
        config.validate()?;
        let OracleKind::ExternalHttp {
            endpoint,
            auth_env,
            timeout_ms,
            max_retries,
            max_in_flight,
        } = &config.kind
        else {
            return Err(OracleError::InvalidConfig(
                "HttpOracle requires an external_http oracle kind".into(),
            ));
        };
        let auth_token = auth_env.as_ref().and_then(|var| std::env::var(var).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_millis(*timeout_ms))
            .build()
            .map_err(|e| OracleError::InvalidConfig(e.to_string()))?;
        Ok(HttpOracle {
            endpoint: endpoint.clone(),
            client,
            auth_token,
            max_retries: *max_retries,
            max_in_flight: *max_in_flight,
            max_input_tokens: config.max_input_tokens,
            max_new_tokens: config.max_new_tokens,
            vocab,
        })
    }
}

impl CompletionOracle for HttpOracle {
    fn complete_truncated(&self, prompt_tokens: &[u32]) -> Result<Vec<u32>, OracleError> {
        // A truncated token prefix can start mid-character; transport is
        // best-effort text, so replace rather than fail.
        let bytes = self.vocab.decode_bytes(prompt_tokens)?;
        let prompt = String::from_utf8_lossy(&bytes).into_owned();
        let request = CompletionRequest {
            prompt: &prompt,
            max_tokens: self.max_new_tokens,
        };

        let attempts = self.max_retries.max(1);
        let mut last_error = String::new();
        for _ in 0..attempts {
            let mut req = self.client.post(&self.endpoint).json(&request);
            if let Some(token) = &self.auth_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let body: CompletionResponse = resp
                        .json()
                        .map_err(|e| OracleError::External {
                            attempts,
                            reason: format!("malformed completion response: {e}"),
                        })?;
                    return Ok(self.vocab.encode(&body.completion));
                }
                Ok(resp) => last_error = format!("http status {}", resp.status()),
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(OracleError::External {
            attempts,
            reason: last_error,
        })
    }

    fn max_input_tokens(&self) -> usize {
        self.max_input_tokens
    }

    fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}

/// One training example for the estimator: a prompt and the quality of the
/// oracle's completion for it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub prompt_tokens: Vec<u32>,
    pub score: QualityScore,
    /// Retained for audit; empty for null-ground-truth pairs.
    pub oracle_completion: Vec<u32>,
    pub was_null_ground_truth: bool,
}

/// Result of labeling a dataset.
#[derive(Debug)]
pub struct LabelOutcome {
    pub examples: Vec<LabeledExample>,
    /// (pair index, reason) for pairs whose oracle call ultimately failed.
    pub skipped: Vec<(usize, String)>,
    /// Number of completion calls actually issued.
    pub oracle_calls: usize,
}

/// Label every pair: empty ground truth scores 0 with no oracle call;
/// otherwise the oracle's completion is scored against the ground truth
/// truncated to the oracle's `max_new_tokens`.
pub fn label_dataset<O: CompletionOracle>(
    pairs: &[PromptPair],
    oracle: &O,
    vocab: &BpeVocab,
    metric: Metric,
    trivial: Option<&TrivialNgramSet>,
) -> Result<LabelOutcome, OracleError> {
    if metric == Metric::CrystalBleu && trivial.is_none() {
        return Err(OracleError::MissingTrivialSet);
    }

    let calls = AtomicUsize::new(0);
    let workers = oracle.max_in_flight().max(1);
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<LabeledExample, String>>> = Vec::new();
    slots.resize_with(pairs.len(), || None);
    let slot_ptr = std::sync::Mutex::new(&mut slots);

    // Claim indices from a shared counter so at most `workers` completions
    // are in flight; results land in per-index slots to keep output order.
    std::thread::scope(|scope| {
        let slot_ptr = &slot_ptr;
        let next = &next;
        let calls = &calls;
        for _ in 0..workers.min(pairs.len().max(1)) {
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pairs.len() {
                    break;
                }
                let result = label_one(&pairs[i], oracle, vocab, metric, trivial, calls);
                let mut guard = slot_ptr.lock().expect("slot lock");
                guard[i] = Some(result);
            });
        }
    });

    let mut examples = Vec::with_capacity(pairs.len());
    let mut skipped = Vec::new();
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.expect("every slot filled") {
            Ok(example) => examples.push(example),
            Err(reason) => skipped.push((i, reason)),
        }
    }
    Ok(LabelOutcome {
        examples,
        skipped,
        oracle_calls: calls.load(Ordering::Relaxed),
    })
}

fn label_one<O: CompletionOracle>(
    pair: &PromptPair,
    oracle: &O,
    vocab: &BpeVocab,
    metric: Metric,
    trivial: Option<&TrivialNgramSet>,
    calls: &AtomicUsize,
) -> Result<LabeledExample, String> {
    let prompt_tokens = vocab.encode(&pair.prompt);
    if pair.ground_truth.is_empty() {
        return Ok(LabeledExample {
            prompt_tokens,
            score: QualityScore { value: 0.0, metric },
            oracle_completion: Vec::new(),
            was_null_ground_truth: true,
        });
    }

    let mut reference = vocab.encode(&pair.ground_truth);
    reference.truncate(oracle.max_new_tokens());
    calls.fetch_add(1, Ordering::Relaxed);
    let completion = oracle
        .complete(&prompt_tokens)
        .map_err(|e| e.to_string())?;
    let score = match metric {
        Metric::Bleu => bleu(&completion, &reference, MAX_ORDER),
        Metric::CrystalBleu => {
            crystal_bleu(&completion, &reference, trivial.expect("checked upstream"))
        }
    }
    .map_err(|e| e.to_string())?;
    Ok(LabeledExample {
        prompt_tokens,
        score,
        oracle_completion: completion,
        was_null_ground_truth: false,
    })
}

#[derive(Serialize, Deserialize)]
struct LabeledRecord {
    prompt_ids: Vec<u32>,
    score: f64,
    metric: Metric,
    null_gt: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    oracle_ids: Vec<u32>,
}

/// Write labeled examples as JSON Lines.
pub fn write_labeled(path: &Path, examples: &[LabeledExample]) -> Result<(), OracleError> {
    let mut out = String::new();
    for example in examples {
        let record = LabeledRecord {
            prompt_ids: example.prompt_tokens.clone(),
            score: example.score.value,
            metric: example.score.metric,
            null_gt: example.was_null_ground_truth,
            oracle_ids: example.oracle_completion.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| OracleError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read labeled examples back from JSON Lines.
pub fn read_labeled(path: &Path) -> Result<Vec<LabeledExample>, OracleError> {
    let content = fs::read_to_string(path).map_err(|source| OracleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut examples = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LabeledRecord = serde_json::from_str(line).map_err(|e| OracleError::Record {
            ordinal: i + 1,
            reason: e.to_string(),
        })?;
        if record.null_gt && record.score != 0.0 {
            return Err(OracleError::Record {
                ordinal: i + 1,
                reason: "null ground truth with non-zero score".to_string(),
            });
        }
        examples.push(LabeledExample {
            prompt_tokens: record.prompt_ids,
            score: QualityScore {
                value: record.score,
                metric: record.metric,
            },
            oracle_completion: record.oracle_ids,
            was_null_ground_truth: record.null_gt,
        });
    }
    Ok(examples)
}
