//! Completion-quality metrics: smoothed BLEU, CrystalBLEU, and Acc@t.
//!
//! BLEU here is the smoothed variant that gives non-zero credit to short
//! completions: add-one smoothing on the n-gram precisions of order >= 2,
//! order 1 left unsmoothed. CrystalBLEU is the same computation after the
//! corpus's most frequent ("trivially shared") n-grams have been removed
//! from both candidate and reference counts.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Maximum n-gram order used by both BLEU variants.
pub const MAX_ORDER: usize = 4;

/// Which metric produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    CrystalBleu,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::CrystalBleu => "crystal_bleu",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bleu" => Ok(Metric::Bleu),
            "crystal_bleu" | "cbleu" => Ok(Metric::CrystalBleu),
            other => Err(MetricsError::UnknownMetric(other.to_string())),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A completion-quality score in `[0, 1]` under a named metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    pub metric: Metric,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference token sequence is empty; null ground truth must be scored upstream")]
    EmptyReference,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<Vec<u32>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Shared BLEU core. `trivial` removes n-gram types from both sides before
/// the precision computation; `None` is plain BLEU. An order whose reference
/// never had any n-grams (reference shorter than the order) contributes
/// precision 1. An order that had reference n-grams but lost them all to
/// removal is dropped from the geometric mean entirely.
fn bleu_core(
    candidate: &[u32],
    reference: &[u32],
    trivial: Option<&TrivialNgramSet>,
    max_order: usize,
) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    let mut n_orders = 0usize;
    for n in 1..=max_order {
        let mut cand_counts = ngram_counts(candidate, n);
        let mut ref_counts = ngram_counts(reference, n);
        let ref_had_any = !ref_counts.is_empty();
        if let Some(set) = trivial {
            for gram in set.of_order(n) {
                cand_counts.remove(gram);
                ref_counts.remove(gram);
            }
        }
        if n == 1 && cand_counts.is_empty() {
            // Every candidate unigram was removed: nothing left to score.
            return Ok(0.0);
        }
        if !ref_had_any {
            // Reference too short for this order: precision 1, still counted.
            n_orders += 1;
            continue;
        }
        if ref_counts.is_empty() {
            // Removal emptied an order the plain metric would have counted.
            continue;
        }

        let total: usize = cand_counts.values().sum();
        let matched: usize = cand_counts
            .iter()
            .map(|(gram, c)| (*c).min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if precision == 0.0 {
            return Ok(0.0);
        }
        log_precision_sum += precision.ln();
        n_orders += 1;
    }

    if n_orders == 0 {
        return Ok(0.0);
    }

    let brevity_penalty = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    Ok(brevity_penalty * (log_precision_sum / n_orders as f64).exp())
}

/// Smoothed BLEU between a candidate and a non-empty reference.
pub fn bleu(candidate: &[u32], reference: &[u32], max_order: usize) -> Result<QualityScore, MetricsError> {
    let value = bleu_core(candidate, reference, None, max_order)?;
    Ok(QualityScore { value, metric: Metric::Bleu })
}

/// CrystalBLEU: BLEU after removing the trivially shared n-grams.
pub fn crystal_bleu(
    candidate: &[u32],
    reference: &[u32],
    trivial: &TrivialNgramSet,
) -> Result<QualityScore, MetricsError> {
    let value = bleu_core(candidate, reference, Some(trivial), MAX_ORDER)?;
    Ok(QualityScore { value, metric: Metric::CrystalBleu })
}

/// The `k` most frequent n-grams (orders 1..=4, pooled) of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrivialNgramSet {
    by_order: [HashSet<Vec<u32>>; MAX_ORDER],
    k: usize,
    corpus_fingerprint: String,
}

impl TrivialNgramSet {
    /// The set with nothing in it; CrystalBLEU with this set equals BLEU.
    pub fn empty() -> Self {
        TrivialNgramSet {
            by_order: Default::default(),
            k: 0,
            corpus_fingerprint: String::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.by_order.iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn corpus_fingerprint(&self) -> &str {
        &self.corpus_fingerprint
    }

    pub fn contains(&self, gram: &[u32]) -> bool {
        match gram.len() {
            1..=MAX_ORDER => self.by_order[gram.len() - 1].contains(gram),
            _ => false,
        }
    }

    fn of_order(&self, n: usize) -> impl Iterator<Item = &Vec<u32>> {
        self.by_order[n - 1].iter()
    }
}

#[derive(Serialize, Deserialize)]
struct TrivialNgramSetFile {
    version: u32,
    k: usize,
    corpus_fingerprint: String,
    ngrams: Vec<Vec<u32>>,
}

impl Serialize for TrivialNgramSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut ngrams: Vec<Vec<u32>> =
            self.by_order.iter().flatten().cloned().collect();
        ngrams.sort();
        TrivialNgramSetFile {
            version: 1,
            k: self.k,
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            ngrams,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TrivialNgramSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = TrivialNgramSetFile::deserialize(deserializer)?;
        let mut by_order: [HashSet<Vec<u32>>; MAX_ORDER] = Default::default();
        for gram in file.ngrams {
            if gram.is_empty() || gram.len() > MAX_ORDER {
                return Err(serde::de::Error::custom(format!(
                    "n-gram of unsupported order {}",
                    gram.len()
                )));
            }
            by_order[gram.len() - 1].insert(gram);
        }
        Ok(TrivialNgramSet {
            by_order,
            k: file.k,
            corpus_fingerprint: file.corpus_fingerprint,
        })
    }
}

/// Collect the `k` most frequent n-grams of orders 1..=4 across the corpus.
/// Ties are broken by lexicographic order of the token-id tuples so the set
/// is reproducible across runs.
pub fn build_trivial_set<S: AsRef<[u32]>>(corpus: &[S], k: usize) -> TrivialNgramSet {
    let mut pooled: HashMap<Vec<u32>, u64> = HashMap::new();
    let mut hasher = Sha256::new();
    for seq in corpus {
        let seq = seq.as_ref();
        for id in seq {
            hasher.update(id.to_le_bytes());
        }
        hasher.update([0xff; 4]);
        for n in 1..=MAX_ORDER {
            for window in seq.windows(n) {
                *pooled.entry(window.to_vec()).or_insert(0) += 1;
            }
            if seq.len() < n {
                break;
            }
        }
    }
    let mut ranked: Vec<(Vec<u32>, u64)> = pooled.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut by_order: [HashSet<Vec<u32>>; MAX_ORDER] = Default::default();
    for (gram, _) in ranked.into_iter().take(k) {
        by_order[gram.len() - 1].insert(gram);
    }
    TrivialNgramSet {
        by_order,
        k,
        corpus_fingerprint: format!("{:x}", hasher.finalize()),
    }
}

/// Result of the rejection-precision metric Acc@t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccAtT {
    /// Among rejected prompts, the fraction whose actual score is also below t.
    pub accuracy: f64,
    pub n_rejected: usize,
    /// True when nothing was rejected; `accuracy` is then reported as 0.
    pub empty: bool,
}

/// Acc@t over (estimated, actual) score pairs: a prompt is rejected when its
/// estimated score is strictly below `t`, and counted as correctly rejected
/// when its actual score is also strictly below `t`.
pub fn acc_at_t(pairs: &[(f64, f64)], t: f64) -> AccAtT {
    debug_assert!((0.0..=1.0).contains(&t));
    let mut n_rejected = 0usize;
    let mut n_correct = 0usize;
    for &(estimated, actual) in pairs {
        if estimated < t {
            n_rejected += 1;
            if actual < t {
                n_correct += 1;
            }
        }
    }
    if n_rejected == 0 {
        AccAtT { accuracy: 0.0, n_rejected: 0, empty: true }
    } else {
        AccAtT {
            accuracy: n_correct as f64 / n_rejected as f64,
            n_rejected,
            empty: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent BLEU oracle: same definition, written as a direct
    /// transcription with its own n-gram counting and a product-space
    /// geometric mean instead of the log-space path above.
    fn reference_bleu(candidate: &[u32], reference: &[u32]) -> f64 {
        if candidate.is_empty() {
            return 0.0;
        }
        let grams = |toks: &[u32], n: usize| -> Vec<Vec<u32>> {
            if toks.len() < n {
                Vec::new()
            } else {
                (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
            }
        };
        let mut product = 1.0f64;
        for n in 1..=4 {
            let c = grams(candidate, n);
            let r = grams(reference, n);
            if r.is_empty() {
                continue; // precision 1: multiplies product by 1
            }
            let mut matched = 0usize;
            let mut r_left = r.clone();
            for g in &c {
                if let Some(pos) = r_left.iter().position(|x| x == g) {
                    r_left.swap_remove(pos);
                    matched += 1;
                }
            }
            let p = if n == 1 {
                matched as f64 / c.len() as f64
            } else {
                (matched as f64 + 1.0) / (c.len() as f64 + 1.0)
            };
            product *= p;
        }
        let bp = if candidate.len() < reference.len() {
            (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
        } else {
            1.0
        };
        bp * product.powf(0.25)
    }

    #[test]
    fn bleu_identity_is_one() {
        let x = vec![1, 2, 3, 4];
        assert_eq!(bleu(&x, &x, 4).unwrap().value, 1.0);
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        assert_eq!(bleu(&[], &[1, 2], 4).unwrap().value, 0.0);
    }

    #[test]
    fn bleu_empty_reference_is_error() {
        assert!(matches!(bleu(&[1], &[], 4), Err(MetricsError::EmptyReference)));
    }

    #[test]
    fn bleu_short_candidate_hand_case() {
        // candidate [a,b] vs reference [a,b,c,d]: p1 = p2 = 1, the smoothed
        // order-3/4 precisions are (0+1)/(0+1) = 1, BP = exp(1 - 4/2).
        let cand = vec![10, 11];
        let reference = vec![10, 11, 12, 13];
        let got = bleu(&cand, &reference, 4).unwrap().value;
        let expected = (1.0f64 - 2.0).exp();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.3679).abs() < 1e-4);
        assert!((got - reference_bleu(&cand, &reference)).abs() < 1e-12);
    }

    #[test]
    fn bleu_matches_reference_on_random_pairs() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..2000 {
            let clen = (next() % 12) as usize;
            let rlen = 1 + (next() % 12) as usize;
            let cand: Vec<u32> = (0..clen).map(|_| (next() % 5) as u32).collect();
            let reference: Vec<u32> = (0..rlen).map(|_| (next() % 5) as u32).collect();
            let got = bleu(&cand, &reference, 4).unwrap().value;
            let want = reference_bleu(&cand, &reference);
            assert!(
                (got - want).abs() < 1e-12,
                "cand={cand:?} ref={reference:?} got={got} want={want}"
            );
        }
    }

    #[test]
    fn trivial_set_k_zero_is_empty() {
        let set = build_trivial_set(&[vec![1u32, 2, 3]], 0);
        assert!(set.is_empty());
    }

    #[test]
    fn trivial_set_top_of_repeated_unigram() {
        // In [a,a,a]: (a) occurs 3 times, (a,a) twice, (a,a,a) once.
        let set = build_trivial_set(&[vec![7u32, 7, 7]], 1);
        assert_eq!(set.len(), 1);
        assert!(set.contains(&[7]));
    }

    #[test]
    fn trivial_set_k_larger_than_distinct_takes_all() {
        let set = build_trivial_set(&[vec![1u32, 2]], 100);
        // distinct n-grams: (1), (2), (1,2)
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn trivial_set_round_trips_through_json() {
        let set = build_trivial_set(&[vec![1u32, 2, 3, 1, 2]], 5);
        let json = serde_json::to_string(&set).unwrap();
        let back: TrivialNgramSet = serde_json::from_str(&json).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn crystal_with_empty_set_equals_bleu_bitwise() {
        let empty = TrivialNgramSet::empty();
        let cases: &[(&[u32], &[u32])] = &[
            (&[1, 2, 3], &[1, 2, 4]),
            (&[5], &[5, 6, 7, 8, 9]),
            (&[1, 1, 1, 1], &[1, 1]),
            (&[2, 3], &[9]),
        ];
        for (cand, reference) in cases {
            let a = bleu(cand, reference, 4).unwrap().value;
            let b = crystal_bleu(cand, reference, &empty).unwrap().value;
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn crystal_all_candidate_ngrams_trivial_is_zero() {
        let cand = vec![1u32, 2, 3];
        let set = build_trivial_set(&[cand.clone()], usize::MAX);
        let got = crystal_bleu(&cand, &[1, 2, 3], &set).unwrap().value;
        assert_eq!(got, 0.0);
    }

    #[test]
    fn crystal_unigram_removal_hand_case() {
        // candidate [a,b,c], reference [a,b,d], trivial {(a)}:
        // p1 = 1/2 on {b,c} vs {b,d}, p2 = 2/3, p3 = 1/2, order 4 had no
        // reference grams so it contributes 1; BP = 1.
        let mut by_order_set = TrivialNgramSet::empty();
        by_order_set.by_order[0].insert(vec![1]);
        let got = crystal_bleu(&[1, 2, 3], &[1, 2, 4], &by_order_set).unwrap().value;
        let expected = (0.5f64 * (2.0 / 3.0) * 0.5 * 1.0).powf(0.25);
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
        assert!((got - 0.63894).abs() < 1e-5);
    }

    #[test]
    fn crystal_drops_order_emptied_by_removal() {
        // Reference [a,a]: its only bigram (a,a) is removed, so order 2 is
        // dropped; candidate [a,b] keeps unigram b unmatched.
        let mut set = TrivialNgramSet::empty();
        set.by_order[1].insert(vec![1, 1]);
        let got = crystal_bleu(&[1, 2], &[1, 1], &set).unwrap().value;
        // p1 = 1/2 (candidate {a,b} vs reference {a,a} clipped), orders 3/4
        // contribute 1 (reference never had them), order 2 dropped.
        let expected = (0.5f64 * 1.0 * 1.0).powf(1.0 / 3.0);
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    }

    #[test]
    fn acc_at_t_worked_example() {
        let pairs = [(0.05, 0.04), (0.2, 0.01), (0.01, 0.5)];
        let got = acc_at_t(&pairs, 0.1);
        assert_eq!(got.n_rejected, 2);
        assert_eq!(got.accuracy, 0.5);
        assert!(!got.empty);
    }

    #[test]
    fn acc_at_t_nothing_rejected() {
        let pairs = [(0.9, 0.1), (0.8, 0.2)];
        let got = acc_at_t(&pairs, 0.5);
        assert_eq!(got.n_rejected, 0);
        assert_eq!(got.accuracy, 0.0);
        assert!(got.empty);
    }

    #[test]
    fn acc_at_t_perfect_estimator() {
        let pairs: Vec<(f64, f64)> = (0..100).map(|i| (i as f64 / 100.0, i as f64 / 100.0)).collect();
        for t in [0.1, 0.2, 0.5] {
            let got = acc_at_t(&pairs, t);
            assert!(got.n_rejected > 0);
            assert_eq!(got.accuracy, 1.0);
        }
    }

    proptest! {
        #[test]
        fn bleu_stays_in_unit_interval(
            cand in proptest::collection::vec(0u32..8, 0..16),
            reference in proptest::collection::vec(0u32..8, 1..16),
        ) {
            let v = bleu(&cand, &reference, 4).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn crystal_stays_in_unit_interval(
            cand in proptest::collection::vec(0u32..8, 0..16),
            reference in proptest::collection::vec(0u32..8, 1..16),
            corpus in proptest::collection::vec(proptest::collection::vec(0u32..8, 1..12), 1..6),
            k in 0usize..30,
        ) {
            let set = build_trivial_set(&corpus, k);
            let v = crystal_bleu(&cand, &reference, &set).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn acc_at_t_matches_brute_force(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..200),
            t in 0.0f64..=1.0,
        ) {
            let got = acc_at_t(&pairs, t);
            let rejected: Vec<&(f64, f64)> = pairs.iter().filter(|(e, _)| *e < t).collect();
            prop_assert_eq!(got.n_rejected, rejected.len());
            if rejected.is_empty() {
                prop_assert!(got.empty);
                prop_assert_eq!(got.accuracy, 0.0);
            } else {
                let correct = rejected.iter().filter(|(_, a)| *a < t).count();
                prop_assert_eq!(got.accuracy, correct as f64 / rejected.len() as f64);
            }
        }

        #[test]
        fn rejection_sets_are_monotone_in_t(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..100),
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(acc_at_t(&pairs, lo).n_rejected <= acc_at_t(&pairs, hi).n_rejected);
        }
    }
}
