//! Pattern-level and corpus-level diversity metrics.
//!
//! * `diver_n`: the share of a candidate's n-grams that are not covered by the
//!   reference, with BLEU-style clipping of the overlap.
//! * PD-N: brevity penalty times the weighted geometric mean of `diver_1..diver_N`.
//! * BLEU, Pairwise-BLEU and Distinct-1 for quality and diversity reporting.
//!
//! Everything here is generic over the token type so the same code scores
//! vocabulary ids and raw string tokens.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to a zero `diver_n` inside the geometric mean when at least
/// one other order is nonzero.
pub const DIVERSITY_FLOOR: f64 = 1e-9;

/// Tokenizer used for metric inputs: lowercase, split on whitespace, and strip
/// punctuation from both ends of each token. Tokens that are pure punctuation
/// are dropped.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Multiset of the n-grams of a token sequence.
#[derive(Debug, Clone)]
pub struct NGramMultiset<'a, T> {
    order: usize,
    counts: HashMap<&'a [T], usize>,
    total: usize,
}

impl<'a, T: Eq + Hash> NGramMultiset<'a, T> {
    pub fn new(tokens: &'a [T], order: usize) -> Self {
        assert!(order >= 1, "n-gram order must be at least 1");
        let mut counts = HashMap::new();
        let mut total = 0;
        if tokens.len() >= order {
            for window in tokens.windows(order) {
                *counts.entry(window).or_insert(0) += 1;
                total += 1;
            }
        }
        Self {
            order,
            counts,
            total,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn count(&self, gram: &[T]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [T], usize)> + '_ {
        self.counts.iter().map(|(g, c)| (*g, *c))
    }

    /// `Σ_g min(count(g), other.count(g))`.
    pub fn clipped_overlap(&self, other: &Self) -> usize {
        self.counts
            .iter()
            .map(|(g, &c)| c.min(other.count(g)))
            .sum()
    }
}

/// Clipped n-gram diversity of `candidate` relative to `reference`.
pub fn ngram_diversity<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    if n == 0 || candidate.len() < n {
        return Err(Error::UndefinedOrder {
            order: n,
            len: candidate.len(),
        });
    }
    let cand = NGramMultiset::new(candidate, n);
    let refs = NGramMultiset::new(reference, n);
    let total = cand.total();
    let overlap = cand.clipped_overlap(&refs);
    Ok((total - overlap) as f64 / total as f64)
}

/// Same as [`ngram_diversity`] but with raw (unclipped) reference matches:
/// every candidate n-gram that occurs in the reference at all is removed.
pub fn unclipped_ngram_diversity<T: Eq + Hash>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> Result<f64> {
    if n == 0 || candidate.len() < n {
        return Err(Error::UndefinedOrder {
            order: n,
            len: candidate.len(),
        });
    }
    let cand = NGramMultiset::new(candidate, n);
    let refs = NGramMultiset::new(reference, n);
    let matched: usize = cand
        .iter()
        .filter(|(g, _)| refs.count(g) > 0)
        .map(|(_, c)| c)
        .sum();
    Ok((cand.total() - matched) as f64 / cand.total() as f64)
}

/// `1` when the candidate is longer than the reference, `e^{1 − r/c}` otherwise.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> Result<f64> {
    if candidate_len == 0 || reference_len == 0 {
        return Err(Error::InvalidLength(format!(
            "lengths must be positive (c = {candidate_len}, r = {reference_len})"
        )));
    }
    if candidate_len > reference_len {
        Ok(1.0)
    } else {
        Ok((1.0 - reference_len as f64 / candidate_len as f64).exp())
    }
}

/// Max n-gram order and per-order weights for PD-N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdConfig {
    weights: Vec<f64>,
}

impl PdConfig {
    pub fn uniform(max_order: usize) -> Result<Self> {
        if max_order == 0 {
            return Err(Error::InvalidParameter("max order must be >= 1".into()));
        }
        Self::with_weights(vec![1.0 / max_order as f64; max_order])
    }

    pub fn with_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weights must be positive and finite: {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn max_order(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for PdConfig {
    fn default() -> Self {
        Self::uniform(4).expect("4 is a valid order")
    }
}

/// Weighted geometric mean of per-order scores, skipping orders the
/// candidate is too short for and renormalizing the remaining weights.
fn geometric_mean(scores: &[(f64, f64)]) -> f64 {
    let weight_sum: f64 = scores.iter().map(|(w, _)| w).sum();
    let log_mean: f64 = scores
        .iter()
        .map(|(w, s)| w / weight_sum * s.max(DIVERSITY_FLOOR).ln())
        .sum();
    log_mean.exp()
}

/// PD-N between a candidate and a reference.
pub fn pattern_diversity<T: Eq + Hash>(candidate: &[T], reference: &[T], cfg: &PdConfig) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::InvalidLength("candidate must be non-empty".into()));
    }
    if reference.is_empty() {
        return Err(Error::InvalidLength("reference must be non-empty".into()));
    }
    let mut scores = Vec::with_capacity(cfg.max_order());
    for (idx, &w) in cfg.weights().iter().enumerate() {
        let n = idx + 1;
        if candidate.len() < n {
            continue;
        }
        scores.push((w, ngram_diversity(candidate, reference, n)?));
    }
    if scores.iter().all(|(_, s)| *s == 0.0) {
        return Ok(0.0);
    }
    let bp = brevity_penalty(candidate.len(), reference.len())?;
    Ok(bp * geometric_mean(&scores))
}

/// Mean of `f(outputs[i], outputs[j])` over ordered pairs `i ≠ j`.
fn ordered_pair_mean<T, F>(outputs: &[Vec<T>], mut f: F) -> Result<f64>
where
    F: FnMut(&[T], &[T]) -> Result<f64>,
{
    if outputs.len() < 2 {
        return Err(Error::InsufficientOutputs(outputs.len()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, a) in outputs.iter().enumerate() {
        for (j, b) in outputs.iter().enumerate() {
            if i != j {
                sum += f(a, b)?;
                pairs += 1;
            }
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean PD-N over all ordered pairs of one input's outputs.
pub fn pd_over_set<T: Eq + Hash>(outputs: &[Vec<T>], cfg: &PdConfig) -> Result<f64> {
    ordered_pair_mean(outputs, |a, b| pattern_diversity(a, b, cfg))
}

/// Sentence BLEU with uniform weights up to `max_order`, clipped n-gram
/// precision against all references, and the brevity penalty against the
/// reference closest in length (shorter wins ties). No smoothing: any order
/// with zero matches makes the score zero. Orders longer than the candidate
/// are skipped.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_order: usize) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::InvalidLength("candidate must be non-empty".into()));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("no references".into()));
    }
    if max_order == 0 {
        return Err(Error::InvalidParameter("max order must be >= 1".into()));
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("references are non-empty");
    if r == 0 {
        return Ok(0.0);
    }

    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_order.min(c) {
        let cand = NGramMultiset::new(candidate, n);
        let ref_sets: Vec<_> = references
            .iter()
            .map(|r| NGramMultiset::new(r.as_ref(), n))
            .collect();
        let matched: usize = cand
            .iter()
            .map(|(g, count)| {
                let max_ref = ref_sets.iter().map(|s| s.count(g)).max().unwrap_or(0);
                count.min(max_ref)
            })
            .sum();
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / cand.total() as f64).ln();
        orders += 1;
    }
    Ok(brevity_penalty(c, r)? * (log_sum / orders as f64).exp())
}

/// Mean BLEU over ordered output pairs; lower is more diverse.
pub fn pairwise_bleu<T: Eq + Hash>(outputs: &[Vec<T>], max_order: usize) -> Result<f64> {
    ordered_pair_mean(outputs, |a, b| bleu(a, &[b], max_order))
}

/// Unique unigrams divided by total unigrams across all outputs.
pub fn distinct_1<T: Eq + Hash, S: AsRef<[T]>>(outputs: &[S]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyInput("no outputs to score".into()));
    }
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for out in outputs {
        for tok in out.as_ref() {
            unique.insert(tok);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("outputs contain no tokens".into()));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// One input with its generated outputs and optional references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub input: String,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
}

/// Corpus-level report over a set of generation records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: usize,
    pub bleu_1: Option<f64>,
    pub bleu_2: Option<f64>,
    pub bleu_3: Option<f64>,
    pub bleu_4: Option<f64>,
    pub p_bleu_1: f64,
    pub p_bleu_2: f64,
    pub p_bleu_3: f64,
    pub p_bleu_4: f64,
    pub pd_1: f64,
    pub pd_2: f64,
    pub pd_3: f64,
    pub pd_4: f64,
    pub distinct_1: f64,
}

impl MetricReport {
    pub fn bleu(&self) -> [Option<f64>; 4] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4]
    }

    pub fn p_bleu(&self) -> [f64; 4] {
        [self.p_bleu_1, self.p_bleu_2, self.p_bleu_3, self.p_bleu_4]
    }

    pub fn pd(&self) -> [f64; 4] {
        [self.pd_1, self.pd_2, self.pd_3, self.pd_4]
    }
}

impl std::fmt::Display for MetricReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "records     {}", self.records)?;
        for (n, b) in self.bleu().iter().enumerate() {
            match b {
                Some(v) => writeln!(f, "BLEU-{}      {v:.4}", n + 1)?,
                None => writeln!(f, "BLEU-{}      n/a (no references)", n + 1)?,
            }
        }
        for (n, v) in self.p_bleu().iter().enumerate() {
            writeln!(f, "P-BLEU-{}    {v:.4}", n + 1)?;
        }
        for (n, v) in self.pd().iter().enumerate() {
            writeln!(f, "PD-{}        {v:.4}", n + 1)?;
        }
        write!(f, "DISTINCT-1  {:.4}", self.distinct_1)
    }
}

/// Scores a list of records. Records are tokenized with [`metric_tokens`].
/// BLEU is averaged over every output of every record that has references.
pub fn evaluate_records(records: &[GenerationRecord]) -> Result<MetricReport> {
    use rayon::prelude::*;

    if records.is_empty() {
        return Err(Error::EmptyInput("no generation records".into()));
    }

    struct Scores {
        bleu: Option<Vec<[f64; 4]>>,
        p_bleu: [f64; 4],
        pd: [f64; 4],
    }

    let per_record: Vec<Result<Scores>> = records
        .par_iter()
        .enumerate()
        .map(|(idx, rec)| {
            let outputs: Vec<Vec<String>> = rec.outputs.iter().map(|s| metric_tokens(s)).collect();
            if let Some(pos) = outputs.iter().position(|o| o.is_empty()) {
                return Err(Error::EmptyInput(format!(
                    "record {} output {pos} has no tokens",
                    idx + 1
                )));
            }
            let refs: Vec<Vec<String>> = rec.references.iter().map(|s| metric_tokens(s)).collect();
            let bleu_scores = if refs.is_empty() {
                None
            } else {
                let mut rows = Vec::with_capacity(outputs.len());
                for out in &outputs {
                    let mut row = [0.0; 4];
                    for (n, slot) in row.iter_mut().enumerate() {
                        *slot = bleu(out, &refs, n + 1)?;
                    }
                    rows.push(row);
                }
                Some(rows)
            };
            let mut p_bleu = [0.0; 4];
            let mut pd = [0.0; 4];
            for n in 0..4 {
                p_bleu[n] = pairwise_bleu(&outputs, n + 1)?;
                pd[n] = pd_over_set(&outputs, &PdConfig::uniform(n + 1)?)?;
            }
            Ok(Scores {
                bleu: bleu_scores,
                p_bleu,
                pd,
            })
        })
        .collect();

    // Sequential reduction keeps the sums independent of thread scheduling.
    let mut bleu_sum = [0.0; 4];
    let mut bleu_count = 0usize;
    let mut p_bleu = [0.0; 4];
    let mut pd = [0.0; 4];
    for scores in per_record {
        let scores = scores?;
        if let Some(rows) = scores.bleu {
            for row in rows {
                for n in 0..4 {
                    bleu_sum[n] += row[n];
                }
                bleu_count += 1;
            }
        }
        for n in 0..4 {
            p_bleu[n] += scores.p_bleu[n];
            pd[n] += scores.pd[n];
        }
    }
    let count = records.len() as f64;
    let all_outputs: Vec<Vec<String>> = records
        .iter()
        .flat_map(|r| r.outputs.iter().map(|s| metric_tokens(s)))
        .collect();
    let bleu_at = |n: usize| (bleu_count > 0).then(|| bleu_sum[n] / bleu_count as f64);

    Ok(MetricReport {
        records: records.len(),
        bleu_1: bleu_at(0),
        bleu_2: bleu_at(1),
        bleu_3: bleu_at(2),
        bleu_4: bleu_at(3),
        p_bleu_1: p_bleu[0] / count,
        p_bleu_2: p_bleu[1] / count,
        p_bleu_3: p_bleu[2] / count,
        p_bleu_4: p_bleu[3] / count,
        pd_1: pd[0] / count,
        pd_2: pd[1] / count,
        pd_3: pd[2] / count,
        pd_4: pd[3] / count,
        distinct_1: distinct_1::<String, _>(&all_outputs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toks(s: &str) -> Vec<String> {
        metric_tokens(s)
    }

    #[test]
    fn tokenizer_strips_punctuation_and_case() {
        assert_eq!(toks("The cat is on the mat."), ["the", "cat", "is", "on", "the", "mat"]);
        assert_eq!(toks("  Dog. "), ["dog"]);
        assert_eq!(toks("John's  -- exam!"), ["john's", "exam"]);
    }

    #[test]
    fn ngram_multiset_totals() {
        let seq = [1, 2, 1, 2, 1];
        for n in 1..=6 {
            let ms = NGramMultiset::new(&seq, n);
            assert_eq!(ms.total(), seq.len().saturating_sub(n - 1));
            assert!(ms.iter().all(|(_, c)| c >= 1));
        }
        let bi = NGramMultiset::new(&seq, 2);
        assert_eq!(bi.count(&[1, 2]), 2);
        assert_eq!(bi.count(&[2, 1]), 2);
        assert_eq!(bi.distinct(), 2);
    }

    #[test]
    fn diversity_extremes() {
        let a = toks("a b c d");
        assert_eq!(ngram_diversity(&a, &a, 1).unwrap(), 0.0);
        assert_eq!(ngram_diversity(&a, &toks("e f g"), 2).unwrap(), 1.0);
        assert!(matches!(
            ngram_diversity(&a, &a, 5),
            Err(Error::UndefinedOrder { order: 5, len: 4 })
        ));
    }

    #[test]
    fn brevity_penalty_branches() {
        assert_eq!(brevity_penalty(10, 7).unwrap(), 1.0);
        assert_eq!(brevity_penalty(7, 7).unwrap(), 1.0);
        assert_abs_diff_eq!(brevity_penalty(1, 7).unwrap(), (-6.0f64).exp(), epsilon = 1e-15);
        assert!(brevity_penalty(0, 3).is_err());
        assert!(brevity_penalty(3, 0).is_err());
        let mut prev = 0.0;
        for c in 1..=9 {
            let bp = brevity_penalty(c, 9).unwrap();
            assert!(bp > prev);
            prev = bp;
        }
    }

    #[test]
    fn pd_edge_cases() {
        let cfg = PdConfig::default();
        let a = toks("w x y z");
        assert_eq!(pattern_diversity(&a, &a, &cfg).unwrap(), 0.0);
        assert_eq!(pattern_diversity(&a, &toks("p q r s"), &cfg).unwrap(), 1.0);
        // Short candidate: only order 1 is defined, penalized through BP.
        let dog = toks("Dog.");
        let pd = pattern_diversity(&dog, &toks("The cat is on the mat."), &cfg).unwrap();
        assert_abs_diff_eq!(pd, (1.0f64 - 6.0).exp(), epsilon = 1e-15);
    }

    #[test]
    fn pd_config_validation() {
        assert!(PdConfig::with_weights(vec![0.5, 0.5]).is_ok());
        assert!(PdConfig::with_weights(vec![0.5, 0.6]).is_err());
        assert!(PdConfig::with_weights(vec![1.0, 0.0]).is_err());
        assert!(PdConfig::uniform(0).is_err());
    }

    #[test]
    fn set_level_scores() {
        let cfg = PdConfig::uniform(2).unwrap();
        let same = vec![toks("a b c"), toks("a b c"), toks("a b c")];
        assert_eq!(pd_over_set(&same, &cfg).unwrap(), 0.0);
        assert_eq!(pairwise_bleu(&same, 4).unwrap(), 1.0);
        let mixed = vec![toks("a b c"), toks("a b c"), toks("d e f")];
        assert_abs_diff_eq!(pd_over_set(&mixed, &cfg).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(
            pd_over_set(&same[..1], &cfg),
            Err(Error::InsufficientOutputs(1))
        ));
        assert!(matches!(
            pairwise_bleu(&same[..1], 2),
            Err(Error::InsufficientOutputs(1))
        ));
    }

    #[test]
    fn bleu_basics() {
        let a = toks("the cat sat on the mat");
        assert_eq!(bleu(&a, &[a.clone()], 4).unwrap(), 1.0);
        assert_eq!(bleu(&a, &[toks("x y z")], 4).unwrap(), 0.0);
        let cand = toks("The the the the the the the.");
        let reference = toks("The cat is on the mat.");
        assert_abs_diff_eq!(bleu(&cand, &[reference], 1).unwrap(), 2.0 / 7.0, epsilon = 1e-15);
    }

    #[test]
    fn bleu_picks_closest_reference_length() {
        let cand = toks("a b");
        // Closest reference has length 3 (distance 1) rather than 6.
        let refs = [toks("a b c"), toks("a b c d e f")];
        let expected = (1.0f64 - 3.0 / 2.0).exp();
        assert_abs_diff_eq!(bleu(&cand, &refs, 2).unwrap(), expected, epsilon = 1e-15);
    }

    #[test]
    fn distinct_counts() {
        assert_eq!(distinct_1::<String, _>(&[toks("a b c")]).unwrap(), 1.0);
        assert_eq!(distinct_1::<String, _>(&[toks("a a"), toks("a a")]).unwrap(), 0.25);
        let empty: Vec<Vec<String>> = Vec::new();
        assert!(matches!(distinct_1::<String, _>(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn report_over_identical_outputs() {
        let records = vec![
            GenerationRecord {
                input: "x".into(),
                outputs: vec!["a b c d e".into(); 3],
                references: vec![],
            };
            2
        ];
        let report = evaluate_records(&records).unwrap();
        assert_eq!(report.p_bleu(), [1.0; 4]);
        assert_eq!(report.pd(), [0.0; 4]);
        assert_eq!(report.bleu_1, None);
        assert_eq!(report.distinct_1, 5.0 / 30.0);
        assert!(matches!(evaluate_records(&[]), Err(Error::EmptyInput(_))));
    }
}
