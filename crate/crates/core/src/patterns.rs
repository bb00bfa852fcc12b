//! Attention patterns: indicator matrices, the constraints that enforce them,
//! global relevance of a pattern on each head, and t-test selection.
//!
//! A pattern is a predicate over ordered position pairs `(i, j)` of one
//! document. Three families are supported: matching token, intra-sentence
//! and relative position.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_special, Dataset, Document, TokenId};
use crate::error::{Error, Result};
use crate::model::{AttentionConstraint, AttentionMask, HeadFamily, HeadId, Model};
use crate::stats::{self, TTest};
use crate::tensor::Mat;

/// Default significance level for head selection.
pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PatternKind {
    MatchingToken,
    IntraSentence,
    RelativePosition(i64),
}

/// A named pattern. Serialized as `{"name", "kind", "offset"?}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "PatternFile", into = "PatternFile")]
pub struct PatternSpec {
    pub name: String,
    pub kind: PatternKind,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    MatchingToken,
    IntraSentence,
    RelativePosition,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternFile {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    offset: Option<i64>,
}

impl TryFrom<PatternFile> for PatternSpec {
    type Error = Error;

    fn try_from(f: PatternFile) -> Result<Self> {
        let kind = match (f.kind, f.offset) {
            (KindTag::MatchingToken, None) => PatternKind::MatchingToken,
            (KindTag::IntraSentence, None) => PatternKind::IntraSentence,
            (KindTag::RelativePosition, Some(d)) => PatternKind::RelativePosition(d),
            (KindTag::RelativePosition, None) => {
                return Err(Error::config("pattern.offset", "required for relative_position"))
            }
            (_, Some(_)) => {
                return Err(Error::config("pattern.offset", "only valid for relative_position"))
            }
        };
        let spec = PatternSpec { name: f.name, kind };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<PatternSpec> for PatternFile {
    fn from(s: PatternSpec) -> Self {
        let (kind, offset) = match s.kind {
            PatternKind::MatchingToken => (KindTag::MatchingToken, None),
            PatternKind::IntraSentence => (KindTag::IntraSentence, None),
            PatternKind::RelativePosition(d) => (KindTag::RelativePosition, Some(d)),
        };
        PatternFile {
            name: s.name,
            kind,
            offset,
        }
    }
}

impl PatternSpec {
    pub fn matching_token() -> Self {
        Self {
            name: "matching_token".into(),
            kind: PatternKind::MatchingToken,
        }
    }

    pub fn intra_sentence() -> Self {
        Self {
            name: "intra_sentence".into(),
            kind: PatternKind::IntraSentence,
        }
    }

    pub fn relative_position(offset: i64) -> Self {
        Self {
            name: format!("relative_position_{offset:+}"),
            kind: PatternKind::RelativePosition(offset),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("pattern.name", "must not be empty"));
        }
        if self.kind == PatternKind::RelativePosition(0) {
            return Err(Error::config("pattern.offset", "must be nonzero"));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// `n×n` bits over the non-PAD positions of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl IndicatorMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Self { n, bits }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Positions `(i, j)` with the bit set, row-major.
    pub fn ones(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| (0..self.n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j))
            .collect()
    }
}

struct View<'a> {
    tokens: &'a [TokenId],
    owner: Vec<usize>,
    freq: HashMap<TokenId, usize>,
}

impl<'a> View<'a> {
    fn new(doc: &'a Document) -> Self {
        Self {
            tokens: &doc.flat[..doc.len()],
            owner: doc.sentence_of(),
            freq: doc.token_frequencies(),
        }
    }

    /// BOS/EOS and tokens seen once are unconstrained.
    fn repeated(&self, i: usize) -> bool {
        let t = self.tokens[i];
        !is_special(t) && self.freq.get(&t).copied().unwrap_or(0) > 1
    }

    fn target(&self, i: usize, d: i64) -> Option<usize> {
        let j = i as i64 + d;
        (0..self.tokens.len() as i64).contains(&j).then_some(j as usize)
    }
}

pub fn indicator(pattern: &PatternSpec, doc: &Document) -> IndicatorMatrix {
    let v = View::new(doc);
    let n = v.tokens.len();
    match pattern.kind {
        PatternKind::MatchingToken => {
            IndicatorMatrix::from_fn(n, |i, j| v.repeated(i) && v.tokens[i] == v.tokens[j])
        }
        PatternKind::IntraSentence => IndicatorMatrix::from_fn(n, |i, j| v.owner[i] == v.owner[j]),
        PatternKind::RelativePosition(d) => IndicatorMatrix::from_fn(n, |i, j| v.target(i, d) == Some(j)),
    }
}

/// The per-document constraint that enforces `pattern` on a head.
pub fn build_constraint(pattern: &PatternSpec, doc: &Document) -> AttentionConstraint {
    let v = View::new(doc);
    let n = v.tokens.len();
    match pattern.kind {
        PatternKind::MatchingToken => AttentionConstraint::Mask(AttentionMask::from_fn(n, |i, j| {
            !v.repeated(i) || v.tokens[i] == v.tokens[j]
        })),
        PatternKind::IntraSentence => {
            AttentionConstraint::Mask(AttentionMask::from_fn(n, |i, j| v.owner[i] == v.owner[j]))
        }
        PatternKind::RelativePosition(d) => {
            AttentionConstraint::Fixed((0..n).map(|i| v.target(i, d).unwrap_or(i)).collect())
        }
    }
}

/// `Σᵢⱼ αᵢⱼ·indᵢⱼ / len`.
pub fn gr_example(alpha: &Mat, ind: &IndicatorMatrix, len: usize) -> Result<f64> {
    if alpha.rows != len || alpha.cols != len || ind.size() != len {
        return Err(Error::Shape(format!(
            "alpha {}x{}, indicator {2}x{2}, len {len}",
            alpha.rows,
            alpha.cols,
            ind.size()
        )));
    }
    if len == 0 {
        return Err(Error::Shape("empty document".into()));
    }
    let mut mass = 0.0;
    for i in 0..len {
        for (j, &a) in alpha.row(i).iter().enumerate() {
            if ind.get(i, j) {
                mass += a;
            }
        }
    }
    Ok(mass / len as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRelevance {
    pub layer: usize,
    pub head: usize,
    pub family: HeadFamily,
    pub gr: f64,
    pub samples: Vec<f64>,
    #[serde(with = "stats::extended_f64")]
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub reject: bool,
}

impl HeadRelevance {
    pub fn head_id(&self) -> HeadId {
        HeadId {
            layer: self.layer,
            family: self.family,
            head: self.head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub pattern: PatternSpec,
    pub split: String,
    pub alpha: f64,
    /// Mean GR over all heads, the null-hypothesis mean of every test.
    pub population_mean: f64,
    pub heads: Vec<HeadRelevance>,
}

impl RelevanceReport {
    pub fn head(&self, h: HeadId) -> Option<&HeadRelevance> {
        self.heads.iter().find(|r| r.head_id() == h)
    }
}

/// Per-document, per-head samples `gr(x, P, h)` in `model.heads()` order.
pub fn gr_samples(model: &Model, dataset: &Dataset, pattern: &PatternSpec) -> Result<Vec<Vec<f64>>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let heads = model.heads();
    dataset
        .documents
        .par_iter()
        .map(|doc| {
            let trace = model.analyze(doc)?;
            let ind = indicator(pattern, doc);
            heads
                .iter()
                .map(|&h| {
                    let alpha = trace.attention(h).ok_or_else(|| Error::UnknownHead(h.to_string()))?;
                    gr_example(alpha, &ind, trace.len())
                })
                .collect()
        })
        .collect()
}

/// GR of `pattern` on every head with t-test verdicts at level `alpha`.
pub fn gr_dataset(model: &Model, dataset: &Dataset, pattern: &PatternSpec, alpha: f64) -> Result<RelevanceReport> {
    pattern.validate()?;
    let per_doc = gr_samples(model, dataset, pattern)?;
    let heads = model.heads();
    let samples: Vec<Vec<f64>> = (0..heads.len())
        .map(|h| per_doc.iter().map(|row| row[h]).collect())
        .collect();
    let grs: Vec<f64> = samples.iter().map(|s| mean(s)).collect();
    let population_mean = mean(&grs);
    let heads = heads
        .into_iter()
        .zip(samples)
        .zip(grs)
        .map(|((h, samples), gr)| {
            let TTest { t, df, p, reject } = stats::t_test_head(&samples, population_mean, alpha)?;
            Ok(HeadRelevance {
                layer: h.layer,
                head: h.head,
                family: h.family,
                gr,
                samples,
                t,
                df,
                p,
                reject,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RelevanceReport {
        pattern: pattern.clone(),
        split: dataset.split.clone(),
        alpha,
        population_mean,
        heads,
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub pattern: String,
    pub kept: bool,
    pub heads: Vec<HeadId>,
}

/// Keeps a pattern iff at least one head rejects `GR(P,h) ≤ ḠR`.
pub fn select_pattern(report: &RelevanceReport) -> Selection {
    let heads: Vec<HeadId> = report.heads.iter().filter(|h| h.reject).map(HeadRelevance::head_id).collect();
    Selection {
        pattern: report.pattern.name.clone(),
        kept: !heads.is_empty(),
        heads,
    }
}
