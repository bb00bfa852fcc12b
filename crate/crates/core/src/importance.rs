//! Head importance: leave-one-out loss increment, gate sensitivity and
//! first-order Taylor estimates, with normalization and cosine comparison.
//!
//! Every estimator runs dropout-free with the model's own pattern
//! constraints. Per-document losses are the mean BCE over sentences; dataset
//! totals are sums over documents.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, HeadFamily, HeadGates, HeadId, Model, Params};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "loo")]
    LeaveOneOut,
    Sensitivity,
    Taylor,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::LeaveOneOut, Method::Sensitivity, Method::Taylor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::LeaveOneOut => "loo",
            Method::Sensitivity => "sensitivity",
            Method::Taylor => "taylor",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loo" | "leave_one_out" => Ok(Method::LeaveOneOut),
            "sensitivity" => Ok(Method::Sensitivity),
            "taylor" => Ok(Method::Taylor),
            other => Err(Error::config("method", format!("unknown importance method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub family: HeadFamily,
    pub raw: f64,
    pub normalized: f64,
}

impl HeadScore {
    pub fn head_id(&self) -> HeadId {
        HeadId {
            layer: self.layer,
            family: self.family,
            head: self.head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: Method,
    pub dataset: String,
    /// `Σ_x L(x)` with every gate at 1.
    pub baseline_loss: f64,
    /// One entry per head, in canonical head order.
    pub heads: Vec<HeadScore>,
}

impl ImportanceReport {
    fn new(method: Method, dataset: &Dataset, baseline_loss: f64, heads: &[HeadId], raw: Vec<f64>) -> Self {
        let heads = heads
            .iter()
            .zip(raw)
            .map(|(h, raw)| HeadScore {
                layer: h.layer,
                head: h.head,
                family: h.family,
                raw,
                normalized: 0.0,
            })
            .collect();
        normalize(&Self {
            method,
            dataset: dataset.split.clone(),
            baseline_loss,
            heads,
        })
    }

    pub fn raw(&self) -> Vec<f64> {
        self.heads.iter().map(|h| h.raw).collect()
    }

    pub fn score(&self, h: HeadId) -> Option<&HeadScore> {
        self.heads.iter().find(|s| s.head_id() == h)
    }
}

pub fn estimate(model: &Model, dataset: &Dataset, method: Method) -> Result<ImportanceReport> {
    match method {
        Method::LeaveOneOut => leave_one_out(model, dataset),
        Method::Sensitivity => sensitivity(model, dataset),
        Method::Taylor => taylor(model, dataset),
    }
}

fn nonempty(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::EmptyDataset)
    } else {
        Ok(())
    }
}

/// Sums per-document rows in document order so results do not depend on
/// thread scheduling.
fn sum_rows(rows: Vec<Vec<f64>>, width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    acc
}

/// `I(h) = Σ_x [L(x; ξ_h = 0) − L(x; ξ = 1)]`.
pub fn leave_one_out(model: &Model, dataset: &Dataset) -> Result<ImportanceReport> {
    nonempty(dataset)?;
    let heads = model.heads();
    let ones = HeadGates::ones(model);
    let rows = dataset
        .documents
        .par_iter()
        .map(|doc| {
            let labels = doc.labels()?;
            let constraints = model.pattern_constraints(doc);
            let base = model::loss(&model.forward(doc, &constraints, &ones)?, labels)?;
            let mut row = Vec::with_capacity(heads.len() + 1);
            row.push(base);
            for &h in &heads {
                let gates = ones.clone().with(h, 0.0)?;
                row.push(model::loss(&model.forward(doc, &constraints, &gates)?, labels)? - base);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let totals = sum_rows(rows, heads.len() + 1);
    Ok(ImportanceReport::new(
        Method::LeaveOneOut,
        dataset,
        totals[0],
        &heads,
        totals[1..].to_vec(),
    ))
}

/// `score(h) = Σ_x |∂L(x)/∂ξ_h|` at `ξ = 1`.
pub fn sensitivity(model: &Model, dataset: &Dataset) -> Result<ImportanceReport> {
    nonempty(dataset)?;
    let heads = model.heads();
    let ones = HeadGates::ones(model);
    let rows = dataset
        .documents
        .par_iter()
        .map(|doc| {
            let g = model.gradients(doc, &model.pattern_constraints(doc), &ones, doc.labels()?)?;
            let mut row = vec![g.loss];
            row.extend(heads.iter().map(|&h| g.gates.get(h).abs()));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let totals = sum_rows(rows, heads.len() + 1);
    Ok(ImportanceReport::new(
        Method::Sensitivity,
        dataset,
        totals[0],
        &heads,
        totals[1..].to_vec(),
    ))
}

/// Total parameter gradient `∂(Σ_x L(x))/∂θ` and the total loss.
pub fn total_gradient(model: &Model, dataset: &Dataset) -> Result<(Params, f64)> {
    nonempty(dataset)?;
    let ones = HeadGates::ones(model);
    let grads = dataset
        .documents
        .par_iter()
        .map(|doc| model.gradients(doc, &model.pattern_constraints(doc), &ones, doc.labels()?))
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.params.zeros_like();
    let mut loss = 0.0;
    for g in &grads {
        total.add_assign(&g.params);
        loss += g.loss;
    }
    Ok((total, loss))
}

fn column_slice_dot(theta: &Mat, grad: &Mat, start: usize, len: usize) -> f64 {
    (0..theta.rows)
        .map(|r| {
            let a = &theta.row(r)[start..start + len];
            let b = &grad.row(r)[start..start + len];
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum()
}

fn row_slice_dot(theta: &Mat, grad: &Mat, start: usize, len: usize) -> f64 {
    (start..start + len)
        .map(|r| theta.row(r).iter().zip(grad.row(r)).map(|(x, y)| x * y).sum::<f64>())
        .sum()
}

/// `Σ_{θ ∈ head} θ·g`: the head's Q/K/V column slices (with bias slices for
/// encoder heads) and its row slice of the output projection.
pub fn head_parameter_dot(model: &Model, grads: &Params, h: HeadId) -> Result<f64> {
    if !model.has_head(h) {
        return Err(Error::UnknownHead(h.to_string()));
    }
    let (p, g) = (&model.params.layers[h.layer], &grads.layers[h.layer]);
    match h.family {
        HeadFamily::Encoder => {
            let dh = model.config.head_dim();
            let s = h.head * dh;
            Ok([(&p.wq, &g.wq), (&p.wk, &g.wk), (&p.wv, &g.wv), (&p.bq, &g.bq), (&p.bk, &g.bk), (&p.bv, &g.bv)]
                .iter()
                .map(|(t, d)| column_slice_dot(t, d, s, dh))
                .sum::<f64>()
                + row_slice_dot(&p.wo, &g.wo, s, dh))
        }
        HeadFamily::Pal => {
            let (pp, pg) = match (&p.pal, &g.pal) {
                (Some(pp), Some(pg)) => (pp, pg),
                _ => return Err(Error::UnknownHead(h.to_string())),
            };
            let dh = pp.wq.cols / model.n_pal_heads();
            let s = h.head * dh;
            Ok([(&pp.wq, &pg.wq), (&pp.wk, &pg.wk), (&pp.wv, &pg.wv)]
                .iter()
                .map(|(t, d)| column_slice_dot(t, d, s, dh))
                .sum::<f64>()
                + row_slice_dot(&pp.wo, &pg.wo, s, dh))
        }
    }
}

/// `score(h) = (Σ_{θ ∈ head} θ · ∂L_total/∂θ)²`.
pub fn taylor(model: &Model, dataset: &Dataset) -> Result<ImportanceReport> {
    let (grads, loss) = total_gradient(model, dataset)?;
    let heads = model.heads();
    let raw = heads
        .iter()
        .map(|&h| head_parameter_dot(model, &grads, h).map(|s| s * s))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceReport::new(Method::Taylor, dataset, loss, &heads, raw))
}

/// Global min-max over every head; all-equal raw scores normalize to 0.
pub fn normalize(report: &ImportanceReport) -> ImportanceReport {
    let raw = report.raw();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = report.clone();
    for h in &mut out.heads {
        h.normalized = if hi > lo { (h.raw - lo) / (hi - lo) } else { 0.0 };
    }
    out
}

/// Cosine similarity of the raw score vectors in head order.
pub fn compare(a: &ImportanceReport, b: &ImportanceReport) -> Result<f64> {
    let ids = |r: &ImportanceReport| r.heads.iter().map(HeadScore::head_id).collect::<Vec<_>>();
    if ids(a) != ids(b) {
        return Err(Error::HeadSetMismatch);
    }
    cosine(&a.raw(), &b.raw())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    Ok(dot / (na * nb))
}
