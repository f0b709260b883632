//! Corpus ingestion, prompt/ground-truth splitting, and dataset persistence.
//!
//! Each code snippet is split at a uniformly drawn token boundary: the prefix
//! becomes the completion prompt, the suffix its ground truth. Drawing the
//! boundary over `1..=n` inclusive means a `1/n` fraction of pairs has an
//! empty ground truth, i.e. the prompt is already a finished snippet.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tokenizer::BpeVocab;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Java,
    Python,
    #[serde(untagged)]
    Other(String),
}

impl std::str::FromStr for Language {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "java" => Language::Java,
            "python" | "py" => Language::Python,
            other => Language::Other(other.to_string()),
        })
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::Java => f.write_str("java"),
            Language::Python => f.write_str("python"),
            Language::Other(name) => f.write_str(name),
        }
    }
}

/// One function-level record of the raw corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub id: String,
    pub language: Language,
    pub text: String,
}

/// A snippet split into a prompt and its expected completion. The prompt is
/// always non-empty; the ground truth is empty when the split landed on the
/// final token boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub snippet_id: String,
    pub language: Language,
    pub prompt: String,
    pub ground_truth: String,
    pub split_token_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    #[serde(rename = "uniform_token_boundary_v1")]
    UniformTokenBoundary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub snippets: usize,
    pub pairs: usize,
    pub empty_ground_truth_pairs: usize,
}

/// Sidecar metadata persisted next to the pair records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub language: Language,
    pub split_policy: SplitPolicy,
    pub counts: DatasetCounts,
    pub records_sha256: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus path {path}: {source}")]
    UnreadablePath {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus at {0} contains no snippets")]
    NoSnippets(String),
    #[error("duplicate snippet id {0:?}")]
    DuplicateId(String),
    #[error("record {ordinal}: {reason}")]
    Record { ordinal: usize, reason: String },
    #[error("dataset checksum mismatch: manifest says {expected}, records hash to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("manifest counts {manifest:?} disagree with stored records {actual:?}")]
    CountMismatch {
        manifest: DatasetCounts,
        actual: DatasetCounts,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Why a snippet produced no pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSkip {
    /// Fewer than two tokens: nothing to split.
    TooShort { n_tokens: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub snippets: usize,
    pub dropped_empty: usize,
    pub utf8_replacements: usize,
}

fn decode_lossy_counting(bytes: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(bytes.len());
    let mut replacements = 0usize;
    let mut rest = bytes;
    loop {
        match std::str::from_utf8(rest) {
            Ok(s) => {
                out.push_str(s);
                return (out, replacements);
            }
            Err(err) => {
                let valid = err.valid_up_to();
                out.push_str(std::str::from_utf8(&rest[..valid]).expect("validated prefix"));
                out.push('\u{FFFD}');
                replacements += 1;
                let skip = valid + err.error_len().unwrap_or(1);
                rest = &rest[skip..];
            }
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    code: String,
    id: Option<String>,
    language: Option<String>,
}

/// Read a corpus from a directory of files, a `.jsonl` file with a `code`
/// field per line, or a plain newline-delimited file. Empty records are
/// dropped and counted; invalid UTF-8 bytes are replaced and counted.
pub fn ingest(
    source_path: &Path,
    language: &Language,
) -> Result<(Vec<CodeSnippet>, IngestStats), CorpusError> {
    let meta = fs::metadata(source_path).map_err(|source| CorpusError::UnreadablePath {
        path: source_path.display().to_string(),
        source,
    })?;
    let mut stats = IngestStats::default();
    let mut snippets = Vec::new();
    let mut seen = HashSet::new();

    let mut push = |id: String,
                    lang: Language,
                    text: String,
                    stats: &mut IngestStats|
     -> Result<(), CorpusError> {
        if text.trim().is_empty() {
            stats.dropped_empty += 1;
            return Ok(());
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        snippets.push(CodeSnippet { id, language: lang, text });
        Ok(())
    };

    if meta.is_dir() {
        let mut paths: Vec<_> = walkdir::WalkDir::new(source_path)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .collect();
        paths.sort();
        for path in paths {
            let bytes = fs::read(&path).map_err(|source| CorpusError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let (text, replaced) = decode_lossy_counting(&bytes);
            stats.utf8_replacements += replaced;
            let id = path
                .strip_prefix(source_path)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            push(id, language.clone(), text, &mut stats)?;
        }
    } else {
        let bytes = fs::read(source_path).map_err(|source| CorpusError::Io {
            path: source_path.display().to_string(),
            source,
        })?;
        let (content, replaced) = decode_lossy_counting(&bytes);
        stats.utf8_replacements += replaced;
        let jsonl = source_path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
        for (i, line) in content.lines().enumerate() {
            let ordinal = i + 1;
            if line.trim().is_empty() {
                stats.dropped_empty += 1;
                continue;
            }
            if jsonl {
                let record: JsonlRecord =
                    serde_json::from_str(line).map_err(|e| CorpusError::Record {
                        ordinal,
                        reason: format!("invalid JSON: {e}"),
                    })?;
                let lang = record
                    .language
                    .as_deref()
                    .map(|l| l.parse().expect("infallible"))
                    .unwrap_or_else(|| language.clone());
                let id = record.id.unwrap_or_else(|| format!("line-{ordinal}"));
                push(id, lang, record.code, &mut stats)?;
            } else {
                push(
                    format!("line-{ordinal}"),
                    language.clone(),
                    line.to_string(),
                    &mut stats,
                )?;
            }
        }
    }

    if snippets.is_empty() {
        return Err(CorpusError::NoSnippets(source_path.display().to_string()));
    }
    stats.snippets = snippets.len();
    Ok((snippets, stats))
}

fn snippet_rng(seed: u64, snippet_id: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(snippet_id.as_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// True when cutting the token sequence at `index` yields two decodable
/// strings that re-tokenize back to the original sequence.
fn split_is_exact(tokens: &[u32], index: usize, vocab: &BpeVocab) -> Option<(String, String)> {
    let prompt = vocab.decode(&tokens[..index]).ok()?;
    let ground_truth = vocab.decode(&tokens[index..]).ok()?;
    let mut recombined = vocab.encode(&prompt);
    recombined.extend(vocab.encode(&ground_truth));
    (recombined == tokens).then_some((prompt, ground_truth))
}

/// Split one snippet at a token boundary drawn uniformly from `1..=n`.
///
/// Byte-level tokens can end mid-way through a multi-byte character, and BPE
/// prefixes occasionally re-tokenize differently; when the drawn boundary is
/// not exact the next exact boundary is used (the final boundary always is).
pub fn split_snippet(
    snippet: &CodeSnippet,
    vocab: &BpeVocab,
    seed: u64,
) -> Result<PromptPair, SplitSkip> {
    let tokens = vocab.encode(&snippet.text);
    let n = tokens.len();
    if n < 2 {
        return Err(SplitSkip::TooShort { n_tokens: n });
    }
    let drawn = snippet_rng(seed, &snippet.id).gen_range(1..=n);
    for index in drawn..=n {
        if let Some((prompt, ground_truth)) = split_is_exact(&tokens, index, vocab) {
            return Ok(PromptPair {
                snippet_id: snippet.id.clone(),
                language: snippet.language.clone(),
                prompt,
                ground_truth,
                split_token_index: index,
            });
        }
    }
    unreachable!("the final token boundary always reconstructs the snippet");
}

/// Split a whole corpus; returns pairs plus the ids of skipped snippets.
pub fn split_corpus(
    snippets: &[CodeSnippet],
    vocab: &BpeVocab,
    seed: u64,
) -> (Vec<PromptPair>, Vec<(String, SplitSkip)>) {
    let mut pairs = Vec::with_capacity(snippets.len());
    let mut skipped = Vec::new();
    for snippet in snippets {
        match split_snippet(snippet, vocab, seed) {
            Ok(pair) => pairs.push(pair),
            Err(skip) => skipped.push((snippet.id.clone(), skip)),
        }
    }
    (pairs, skipped)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    id: String,
    language: Language,
    prompt: String,
    ground_truth: String,
    split_token_index: usize,
    crc: String,
}

fn record_crc(pair: &PromptPair) -> String {
    let mut hasher = Sha256::new();
    hasher.update(pair.snippet_id.as_bytes());
    hasher.update([0]);
    hasher.update(pair.language.to_string().as_bytes());
    hasher.update([0]);
    hasher.update(pair.prompt.as_bytes());
    hasher.update([0]);
    hasher.update(pair.ground_truth.as_bytes());
    hasher.update([0]);
    hasher.update(pair.split_token_index.to_le_bytes());
    format!("{:x}", hasher.finalize())[..8].to_string()
}

fn counts_of(pairs: &[PromptPair]) -> DatasetCounts {
    let snippets: HashSet<&str> = pairs.iter().map(|p| p.snippet_id.as_str()).collect();
    DatasetCounts {
        snippets: snippets.len(),
        pairs: pairs.len(),
        empty_ground_truth_pairs: pairs.iter().filter(|p| p.ground_truth.is_empty()).count(),
    }
}

impl DatasetManifest {
    pub fn for_pairs(seed: u64, language: Language, pairs: &[PromptPair]) -> Self {
        DatasetManifest {
            version: 1,
            seed,
            language,
            split_policy: SplitPolicy::UniformTokenBoundary,
            counts: counts_of(pairs),
            records_sha256: String::new(),
        }
    }
}

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Persist pairs as JSON Lines plus a trailing manifest file in `dir`.
pub fn persist(
    pairs: &[PromptPair],
    manifest: &DatasetManifest,
    dir: &Path,
) -> Result<(), CorpusError> {
    let actual = counts_of(pairs);
    if manifest.counts != actual {
        return Err(CorpusError::CountMismatch {
            manifest: manifest.counts,
            actual,
        });
    }
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    })?;

    let mut records = String::new();
    for pair in pairs {
        let record = PairRecord {
            id: pair.snippet_id.clone(),
            language: pair.language.clone(),
            prompt: pair.prompt.clone(),
            ground_truth: pair.ground_truth.clone(),
            split_token_index: pair.split_token_index,
            crc: record_crc(pair),
        };
        records.push_str(&serde_json::to_string(&record).expect("record serializes"));
        records.push('\n');
    }
    let records_path = dir.join(PAIRS_FILE);
    fs::write(&records_path, &records).map_err(|source| CorpusError::Io {
        path: records_path.display().to_string(),
        source,
    })?;

    let mut stamped = manifest.clone();
    stamped.records_sha256 = format!("{:x}", Sha256::digest(records.as_bytes()));
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&stamped).expect("manifest serializes"),
    )
    .map_err(|source| CorpusError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Load a persisted dataset, verifying per-record checksums, the dataset
/// hash, and the manifest counts.
pub fn load(dir: &Path) -> Result<(Vec<PromptPair>, DatasetManifest), CorpusError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text =
        fs::read_to_string(&manifest_path).map_err(|source| CorpusError::UnreadablePath {
            path: manifest_path.display().to_string(),
            source,
        })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&manifest_text).map_err(|source| CorpusError::Json {
            path: manifest_path.display().to_string(),
            source,
        })?;

    let records_path = dir.join(PAIRS_FILE);
    let records = fs::read_to_string(&records_path).map_err(|source| CorpusError::UnreadablePath {
        path: records_path.display().to_string(),
        source,
    })?;
    let actual_hash = format!("{:x}", Sha256::digest(records.as_bytes()));
    if actual_hash != manifest.records_sha256 {
        return Err(CorpusError::ChecksumMismatch {
            expected: manifest.records_sha256.clone(),
            actual: actual_hash,
        });
    }

    let mut pairs = Vec::new();
    for (i, line) in records.lines().enumerate() {
        let ordinal = i + 1;
        let record: PairRecord = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            ordinal,
            reason: format!("invalid JSON: {e}"),
        })?;
        let pair = PromptPair {
            snippet_id: record.id,
            language: record.language,
            prompt: record.prompt,
            ground_truth: record.ground_truth,
            split_token_index: record.split_token_index,
        };
        if record_crc(&pair) != record.crc {
            return Err(CorpusError::Record {
                ordinal,
                reason: "checksum mismatch".to_string(),
            });
        }
        pairs.push(pair);
    }

    let actual = counts_of(&pairs);
    if manifest.counts != actual {
        return Err(CorpusError::CountMismatch {
            manifest: manifest.counts,
            actual,
        });
    }
    Ok((pairs, manifest))
}
