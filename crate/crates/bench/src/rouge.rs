//! ROUGE-N (clipped n-gram overlap) and sentence-level ROUGE-L (longest
//! common subsequence). Tokens are compared exactly; [`tokenize`] lowercases
//! and splits on whitespace, with no stemming.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    /// Scores from an overlap count and the two totals. An empty side gives zeros.
    pub fn from_counts(overlap: usize, hyp_total: usize, ref_total: usize) -> Self {
        if hyp_total == 0 || ref_total == 0 {
            return RougeScore::default();
        }
        let precision = overlap as f64 / hyp_total as f64;
        let recall = overlap as f64 / ref_total as f64;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        RougeScore { precision, recall, f1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

pub fn rouge_n<T: Eq + Hash>(reference: &[T], hypothesis: &[T], n: usize) -> Result<RougeScore> {
    if n == 0 {
        return Err(BenchError::Usage("ROUGE-N needs n >= 1".into()));
    }
    let refs = ngram_counts(reference, n);
    let hyps = ngram_counts(hypothesis, n);
    let overlap = hyps.iter().map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0))).sum();
    Ok(RougeScore::from_counts(overlap, hyps.values().sum(), refs.values().sum()))
}

/// Length of the longest common subsequence, O(|a| |b|) time, O(|b|) space.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(reference: &[T], hypothesis: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(reference, hypothesis), hypothesis.len(), reference.len())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L of two texts after [`tokenize`].
pub fn rouge(reference: &str, hypothesis: &str) -> RougeReport {
    let (r, h) = (tokenize(reference), tokenize(hypothesis));
    RougeReport {
        rouge1: rouge_n(&r, &h, 1).expect("n = 1"),
        rouge2: rouge_n(&r, &h, 2).expect("n = 2"),
        rouge_l: rouge_l(&r, &h),
    }
}
