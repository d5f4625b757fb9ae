//! ROUGE-1/2/L and the weighted combination used as the final reward.
//!
//! Multi-sentence summaries are compared as flat token sequences. No
//! stemming, stopword removal or length cutoff is applied.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(matched: usize, candidate_total: usize, reference_total: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        RougeScore::from_pr(ratio(matched, candidate_total), ratio(matched, reference_total))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore {
            recall,
            precision,
            f1,
        }
    }
}

/// Weights of ROUGE-1, ROUGE-2 and ROUGE-L F1 in the combined score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub wl: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w1: 0.4,
            w2: 1.0,
            wl: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn new(w1: f64, w2: f64, wl: f64) -> Option<Self> {
        (w1 >= 0.0 && w2 >= 0.0 && wl >= 0.0).then_some(RewardWeights { w1, w2, wl })
    }

    pub fn total(&self) -> f64 {
        self.w1 + self.w2 + self.wl
    }
}

/// Multiset of contiguous `n`-grams.
pub fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    assert!(n >= 1, "n-gram order must be positive");
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched: usize = refs
        .iter()
        .map(|(g, &c)| c.min(cand.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(matched, cand.values().sum(), refs.values().sum())
}

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) memory.
pub fn lcs_length<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_length(candidate, reference), candidate.len(), reference.len())
}

/// ROUGE-1, ROUGE-2 and ROUGE-L for one candidate/reference pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeReport {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

impl RougeReport {
    pub fn compute<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        RougeReport {
            rouge1: rouge_n(candidate, reference, 1),
            rouge2: rouge_n(candidate, reference, 2),
            rouge_l: rouge_l(candidate, reference),
        }
    }

    pub fn combined(&self, weights: RewardWeights) -> f64 {
        weights.w1 * self.rouge1.f1 + weights.w2 * self.rouge2.f1 + weights.wl * self.rouge_l.f1
    }

    /// Componentwise mean of several reports.
    pub fn mean(reports: &[RougeReport]) -> RougeReport {
        if reports.is_empty() {
            return RougeReport::default();
        }
        let inv = 1.0 / reports.len() as f64;
        let avg = |f: fn(&RougeReport) -> RougeScore| {
            let (mut r, mut p, mut f1) = (0.0, 0.0, 0.0);
            for rep in reports {
                let s = f(rep);
                r += s.recall;
                p += s.precision;
                f1 += s.f1;
            }
            RougeScore {
                recall: r * inv,
                precision: p * inv,
                f1: f1 * inv,
            }
        };
        RougeReport {
            rouge1: avg(|r| r.rouge1),
            rouge2: avg(|r| r.rouge2),
            rouge_l: avg(|r| r.rouge_l),
        }
    }
}

/// `w1·F1(R-1) + w2·F1(R-2) + wl·F1(R-L)`.
pub fn combined_rouge<T: Eq + Hash>(candidate: &[T], reference: &[T], weights: RewardWeights) -> f64 {
    RougeReport::compute(candidate, reference).combined(weights)
}
