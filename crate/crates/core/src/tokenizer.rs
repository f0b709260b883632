//! Byte-level BPE tokenizer shared by the corpus splitter, the oracle, and
//! the estimator.
//!
//! The base alphabet is the 256 byte values plus two specials (PAD, EOS), so
//! every input encodes without an unknown-token path and
//! `decode(encode(s)) == s` for any string. Merges are learned greedily by
//! descending pair frequency; ties are broken by lexicographic order of the
//! merged byte sequence, which makes training deterministic.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Padding token id (never produced by `encode`).
pub const PAD_ID: u32 = 256;
/// End-of-sequence token id (never produced by `encode`).
pub const EOS_ID: u32 = 257;
/// 256 byte tokens + PAD + EOS.
pub const BASE_VOCAB_SIZE: usize = 258;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocab size {0} is below the {BASE_VOCAB_SIZE}-token base alphabet")]
    TargetTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("token ids do not decode to valid UTF-8")]
    InvalidUtf8,
    #[error("vocab file is corrupt: {0}")]
    CorruptVocab(String),
}

/// A learned BPE vocabulary: ordered merges plus the id-to-bytes table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    /// Merge i combines (left, right) token ids into id `BASE_VOCAB_SIZE + i`.
    merges: Vec<(u32, u32)>,
    /// Byte expansion per token id. Specials expand to nothing.
    token_bytes: Vec<Vec<u8>>,
    /// (left, right) -> (rank, merged id), for encoding.
    merge_rank: HashMap<(u32, u32), (u32, u32)>,
    target_vocab_size: usize,
}

/// Byte classes used to pre-chunk text before BPE. Merges never cross chunk
/// boundaries, which keeps training tractable via chunk-frequency folding.
fn byte_class(b: u8) -> u8 {
    if b == b'_' || b.is_ascii_alphanumeric() {
        0
    } else if b.is_ascii_whitespace() {
        1
    } else {
        2
    }
}

fn chunk_ranges(bytes: &[u8]) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for i in 1..=bytes.len() {
        if i == bytes.len() || byte_class(bytes[i]) != byte_class(bytes[start]) {
            ranges.push((start, i));
            start = i;
        }
    }
    ranges
}

/// Heap entry ordered by (count, then lexicographically smallest merged
/// byte sequence). Entries go stale when counts change; stale entries are
/// skipped on pop.
struct PairCandidate {
    count: u64,
    merged: Vec<u8>,
    pair: (u32, u32),
}

impl PartialEq for PairCandidate {
    fn eq(&self, other: &Self) -> bool {
        self.count == other.count && self.merged == other.merged
    }
}
impl Eq for PairCandidate {}
impl PartialOrd for PairCandidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for PairCandidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.merged.cmp(&self.merged))
    }
}

/// Train a BPE vocabulary up to `target_vocab_size` tokens. Merging stops
/// early when no pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(
    corpus: &[S],
    target_vocab_size: usize,
) -> Result<BpeVocab, TokenizerError> {
    if target_vocab_size < BASE_VOCAB_SIZE {
        return Err(TokenizerError::TargetTooSmall(target_vocab_size));
    }
    if corpus.is_empty() || corpus.iter().all(|s| s.as_ref().is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }

    // Fold the corpus into unique chunks with counts.
    let mut chunk_index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut chunks: Vec<(Vec<u32>, u64)> = Vec::new();
    for text in corpus {
        let bytes = text.as_ref().as_bytes();
        for (start, end) in chunk_ranges(bytes) {
            let chunk = &bytes[start..end];
            match chunk_index.get(chunk) {
                Some(&i) => chunks[i].1 += 1,
                None => {
                    chunk_index.insert(chunk.to_vec(), chunks.len());
                    chunks.push((chunk.iter().map(|&b| b as u32).collect(), 1));
                }
            }
        }
    }
    drop(chunk_index);

    let mut vocab = BpeVocab::byte_level(target_vocab_size);
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut pair_chunks: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (idx, (symbols, count)) in chunks.iter().enumerate() {
        for pair in symbols.windows(2) {
            let pair = (pair[0], pair[1]);
            *pair_counts.entry(pair).or_insert(0) += count;
            pair_chunks.entry(pair).or_default().insert(idx);
        }
    }

    let mut heap: BinaryHeap<PairCandidate> = pair_counts
        .iter()
        .map(|(&pair, &count)| PairCandidate {
            count,
            merged: vocab.merged_bytes(pair),
            pair,
        })
        .collect();

    while vocab.len() < target_vocab_size {
        let best = loop {
            match heap.pop() {
                Some(entry) => {
                    let current = pair_counts.get(&entry.pair).copied().unwrap_or(0);
                    if current == entry.count && current >= 2 {
                        break Some(entry.pair);
                    }
                    // Stale entry; a fresh one was pushed when the count changed.
                }
                None => break None,
            }
        };
        let Some(pair) = best else { break };

        let new_id = vocab.push_merge(pair);
        let affected: Vec<usize> = pair_chunks
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        for idx in affected {
            let (symbols, count) = &mut chunks[idx];
            // Retract this chunk's pair contributions, rewrite, re-add.
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.get_mut(&p).expect("pair was counted") -= *count;
                touched.insert(p);
            }
            let mut rewritten = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    rewritten.push(new_id);
                    i += 2;
                } else {
                    rewritten.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = rewritten;
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_insert(0) += *count;
                pair_chunks.entry(p).or_default().insert(idx);
                touched.insert(p);
            }
            for p in touched {
                let current = pair_counts.get(&p).copied().unwrap_or(0);
                if current >= 2 && p != pair {
                    heap.push(PairCandidate {
                        count: current,
                        merged: vocab.merged_bytes(p),
                        pair: p,
                    });
                }
            }
        }
        pair_counts.remove(&pair);
    }

    Ok(vocab)
}

impl BpeVocab {
    /// The pure byte-level vocabulary with no merges.
    pub fn byte_level(target_vocab_size: usize) -> Self {
        let mut token_bytes: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        token_bytes.push(Vec::new()); // PAD
        token_bytes.push(Vec::new()); // EOS
        BpeVocab {
            merges: Vec::new(),
            token_bytes,
            merge_rank: HashMap::new(),
            target_vocab_size,
        }
    }

    /// Total number of token ids, including the base alphabet and specials.
    pub fn len(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn target_vocab_size(&self) -> usize {
        self.target_vocab_size
    }

    /// The byte expansion of a token id.
    pub fn bytes_of(&self, id: u32) -> Result<&[u8], TokenizerError> {
        self.token_bytes
            .get(id as usize)
            .map(|v| v.as_slice())
            .ok_or(TokenizerError::UnknownId(id))
    }

    fn merged_bytes(&self, pair: (u32, u32)) -> Vec<u8> {
        let mut out = self.token_bytes[pair.0 as usize].clone();
        out.extend_from_slice(&self.token_bytes[pair.1 as usize]);
        out
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let new_id = self.token_bytes.len() as u32;
        let merged = self.merged_bytes(pair);
        self.merges.push(pair);
        self.token_bytes.push(merged);
        self.merge_rank
            .insert(pair, (self.merges.len() as u32 - 1, new_id));
        new_id
    }

    /// A copy of this vocabulary keeping only the first `n_merges` merges.
    pub fn truncated(&self, n_merges: usize) -> BpeVocab {
        let mut out = BpeVocab::byte_level(self.target_vocab_size);
        for &pair in self.merges.iter().take(n_merges) {
            out.push_merge(pair);
        }
        out
    }

    /// Encode text to token ids. Empty text encodes to an empty sequence.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        let mut cache: HashMap<&[u8], Vec<u32>> = HashMap::new();
        for (start, end) in chunk_ranges(bytes) {
            let chunk = &bytes[start..end];
            match cache.get(chunk) {
                Some(ids) => out.extend_from_slice(ids),
                None => {
                    let ids = self.encode_chunk(chunk);
                    out.extend_from_slice(&ids);
                    cache.insert(chunk, ids);
                }
            }
        }
        out
    }

    /// Apply merges within one chunk: repeatedly merge all occurrences of
    /// the lowest-ranked pair present.
    fn encode_chunk(&self, chunk: &[u8]) -> Vec<u32> {
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| b as u32).collect();
        loop {
            let mut best: Option<(u32, (u32, u32), u32)> = None;
            for w in symbols.windows(2) {
                if let Some(&(rank, id)) = self.merge_rank.get(&(w[0], w[1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, (w[0], w[1]), id));
                    }
                }
            }
            let Some((_, pair, id)) = best else { break };
            let mut rewritten = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
                    rewritten.push(id);
                    i += 2;
                } else {
                    rewritten.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = rewritten;
        }
        symbols
    }

    /// Decode token ids back to text. Specials decode to nothing; an id
    /// outside the vocabulary or a byte sequence that is not valid UTF-8 is
    /// an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes).map_err(|_| TokenizerError::InvalidUtf8)
    }

    /// Decode to raw bytes without the UTF-8 check.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.bytes_of(id)?);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    target_vocab_size: usize,
    pad_id: u32,
    eos_id: u32,
    merges: Vec<(u32, u32)>,
    /// id -> hex byte expansion for merged tokens; the base alphabet is implied.
    tokens: Vec<(u32, String)>,
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Serialize for BpeVocab {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let tokens = self
            .token_bytes
            .iter()
            .enumerate()
            .skip(BASE_VOCAB_SIZE)
            .map(|(id, bytes)| (id as u32, to_hex(bytes)))
            .collect();
        VocabFile {
            version: 1,
            target_vocab_size: self.target_vocab_size,
            pad_id: PAD_ID,
            eos_id: EOS_ID,
            merges: self.merges.clone(),
            tokens,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BpeVocab {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let file = VocabFile::deserialize(deserializer)?;
        if file.version != 1 {
            return Err(D::Error::custom(format!(
                "unsupported vocab version {}",
                file.version
            )));
        }
        let mut vocab = BpeVocab::byte_level(file.target_vocab_size);
        for (i, &(left, right)) in file.merges.iter().enumerate() {
            let limit = vocab.len() as u32;
            if left >= limit || right >= limit {
                return Err(D::Error::custom(format!(
                    "merge {i} references id out of range"
                )));
            }
            let id = vocab.push_merge((left, right));
            match file.tokens.get(i) {
                Some(&(stored_id, ref hex)) if stored_id == id => {
                    if *hex != to_hex(&vocab.token_bytes[id as usize]) {
                        return Err(D::Error::custom(format!(
                            "token {id} bytes disagree with its merge"
                        )));
                    }
                }
                _ => return Err(D::Error::custom(format!("missing token entry for id {id}"))),
            }
        }
        Ok(vocab)
    }
}
