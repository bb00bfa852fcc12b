//! ROUGE-N / ROUGE-L F-scores over token sequences and greedy oracle labels.
//!
//! No stemming, no stopword removal, β = 1. ROUGE-L uses a single LCS over the
//! flattened sequences.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, TokenId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn from_counts(overlap: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate == 0 {
            0.0
        } else {
            overlap as f64 / candidate as f64
        };
        let recall = if reference == 0 {
            0.0
        } else {
            overlap as f64 / reference as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap. `n = 0` yields zeros.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, cand.values().sum(), refs.values().sum())
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// R-1, R-2 and R-L F-scores as a triple.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeTriple {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl RougeTriple {
    pub fn score<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Self {
        Self {
            rouge1: rouge_n(candidate, reference, 1).f1,
            rouge2: rouge_n(candidate, reference, 2).f1,
            rouge_l: rouge_l(candidate, reference).f1,
        }
    }

    pub fn mean(items: &[RougeTriple]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Self::default();
        for t in items {
            m.rouge1 += t.rouge1;
            m.rouge2 += t.rouge2;
            m.rouge_l += t.rouge_l;
        }
        Self {
            rouge1: m.rouge1 / n,
            rouge2: m.rouge2 / n,
            rouge_l: m.rouge_l / n,
        }
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self {
            rouge1: self.rouge1 - other.rouge1,
            rouge2: self.rouge2 - other.rouge2,
            rouge_l: self.rouge_l - other.rouge_l,
        }
    }
}

/// Greedy-oracle objective: mean of ROUGE-1 and ROUGE-2 F.
pub fn oracle_objective(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    0.5 * (rouge_n(candidate, reference, 1).f1 + rouge_n(candidate, reference, 2).f1)
}

fn concat_selected(doc: &Document, selected: &[bool]) -> Vec<TokenId> {
    doc.sentences
        .iter()
        .zip(selected)
        .filter(|(_, &on)| on)
        .flat_map(|(s, _)| s.iter().copied())
        .collect()
}

/// One accepted greedy step: the sentence added and the objective after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleStep {
    pub sentence: usize,
    pub objective: f64,
}

/// Greedy selection trace. Candidates are scanned in document order, so ties
/// go to the earlier sentence; selection stops when nothing strictly improves.
pub fn greedy_oracle_steps(doc: &Document, max_sents: usize) -> Vec<OracleStep> {
    let gold = doc.gold_tokens();
    let mut selected = vec![false; doc.n_sentences()];
    let mut best = 0.0;
    let mut steps = Vec::new();
    while steps.len() < max_sents {
        let mut pick: Option<(usize, f64)> = None;
        for s in 0..doc.n_sentences() {
            if selected[s] {
                continue;
            }
            selected[s] = true;
            let obj = oracle_objective(&concat_selected(doc, &selected), &gold);
            selected[s] = false;
            if pick.is_none_or(|(_, o)| obj > o) {
                pick = Some((s, obj));
            }
        }
        match pick {
            Some((s, obj)) if obj > best => {
                selected[s] = true;
                best = obj;
                steps.push(OracleStep {
                    sentence: s,
                    objective: obj,
                });
            }
            _ => break,
        }
    }
    steps
}

pub fn greedy_oracle(doc: &Document, max_sents: usize) -> Vec<bool> {
    let mut labels = vec![false; doc.n_sentences()];
    for step in greedy_oracle_steps(doc, max_sents) {
        labels[step.sentence] = true;
    }
    labels
}
