//! Summary selection with optional trigram blocking, and dataset-level ROUGE.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_special, write_jsonl, Dataset, Document, TokenId};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rouge::RougeTriple;

/// Sentences selected per summary unless configured otherwise.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryPrediction {
    pub id: String,
    /// Strictly increasing sentence indices.
    pub selected: Vec<usize>,
    pub scores: Vec<f64>,
    pub blocking: bool,
}

pub fn trigrams(tokens: &[TokenId]) -> HashSet<[TokenId; 3]> {
    let content: Vec<TokenId> = tokens.iter().copied().filter(|&t| !is_special(t)).collect();
    content.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Greedy top-k by score (ties to the earlier sentence). With `blocking`, a
/// sentence sharing any trigram with the already-selected ones is skipped.
pub fn select_summary(scores: &[f64], doc: &Document, k: usize, blocking: bool) -> SummaryPrediction {
    let mut order: Vec<usize> = (0..scores.len().min(doc.n_sentences())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut seen: HashSet<[TokenId; 3]> = HashSet::new();
    let mut selected = Vec::with_capacity(k);
    for s in order {
        if selected.len() == k {
            break;
        }
        let tri = trigrams(&doc.sentences[s]);
        if blocking {
            if !tri.is_disjoint(&seen) {
                continue;
            }
            seen.extend(tri);
        }
        selected.push(s);
    }
    selected.sort_unstable();
    SummaryPrediction {
        id: doc.id.clone(),
        selected,
        scores: scores.to_vec(),
        blocking,
    }
}

/// Scores are the sentence logits of a dropout-free pass with the model's own
/// pattern constraints.
pub fn predict(model: &Model, doc: &Document, k: usize, blocking: bool) -> Result<SummaryPrediction> {
    let trace = model.analyze(doc)?;
    Ok(select_summary(&trace.logits, doc, k, blocking))
}

pub fn score_prediction(pred: &SummaryPrediction, doc: &Document) -> RougeTriple {
    let candidate: Vec<TokenId> = pred
        .selected
        .iter()
        .flat_map(|&s| doc.sentences[s].iter().copied())
        .filter(|&t| !is_special(t))
        .collect();
    let reference: Vec<TokenId> = doc.gold_tokens().into_iter().filter(|&t| !is_special(t)).collect();
    RougeTriple::score(&candidate, &reference)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: String,
    pub k: usize,
    pub blocking: bool,
    pub rouge: RougeTriple,
}

/// Unweighted mean ROUGE over the dataset plus the per-document predictions.
pub fn evaluate_with_predictions(
    model: &Model,
    dataset: &Dataset,
    k: usize,
    blocking: bool,
) -> Result<(Evaluation, Vec<SummaryPrediction>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = dataset
        .documents
        .par_iter()
        .map(|doc| {
            let pred = predict(model, doc, k, blocking)?;
            let score = score_prediction(&pred, doc);
            Ok((pred, score))
        })
        .collect::<Result<Vec<_>>>()?;
    let (preds, scores): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let eval = Evaluation {
        split: dataset.split.clone(),
        k,
        blocking,
        rouge: RougeTriple::mean(&scores),
    };
    Ok((eval, preds))
}

pub fn evaluate(model: &Model, dataset: &Dataset, k: usize, blocking: bool) -> Result<RougeTriple> {
    Ok(evaluate_with_predictions(model, dataset, k, blocking)?.0.rouge)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    id: &'a str,
    selected: &'a [usize],
    scores: &'a [f64],
}

/// JSON Lines `{"id", "selected", "scores"}`.
pub fn write_predictions(path: &Path, preds: &[SummaryPrediction]) -> Result<()> {
    let lines: Vec<PredictionLine> = preds
        .iter()
        .map(|p| PredictionLine {
            id: &p.id,
            selected: &p.selected,
            scores: &p.scores,
        })
        .collect();
    write_jsonl(path, &lines)
}
