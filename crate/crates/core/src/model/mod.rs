//! Miniature BERTSum-style encoder: learned token and position embeddings,
//! post-layer-norm residual blocks with per-head gates and per-head attention
//! constraints, optional projected attention layers, and a single-logit
//! sentence classifier reading each sentence's BOS state.
//!
//! Everything is `f64` with hand-written reverse mode, so the gradients can be
//! checked against central finite differences.

mod attention;
mod checkpoint;
mod forward;
mod params;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::pal::PalConfig;
use crate::patterns::{self, PatternSpec};
use crate::tensor::softplus;

pub use attention::{constrained_attention, AttentionConstraint, AttentionMask, MASK_LOGIT};
pub(crate) use forward::Dropout;
pub use forward::{ForwardTrace, Gradients};
pub use params::{LayerParams, PalParams, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_ff: 64,
            max_len: 128,
            vocab_size: 500,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            ));
        }
        if self.vocab_size < 5 {
            return Err(Error::config("model.vocab_size", "must be >= 5"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadFamily {
    Encoder,
    Pal,
}

impl fmt::Display for HeadFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadFamily::Encoder => "encoder",
            HeadFamily::Pal => "pal",
        })
    }
}

impl std::str::FromStr for HeadFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(HeadFamily::Encoder),
            "pal" => Ok(HeadFamily::Pal),
            other => Err(Error::config("family", format!("unknown head family {other:?}"))),
        }
    }
}

/// Ordered by layer, then family (encoder before PAL), then head index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub family: HeadFamily,
    pub head: usize,
}

impl HeadId {
    pub fn encoder(layer: usize, head: usize) -> Self {
        Self {
            layer,
            family: HeadFamily::Encoder,
            head,
        }
    }

    pub fn pal(layer: usize, head: usize) -> Self {
        Self {
            layer,
            family: HeadFamily::Pal,
            head,
        }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.family, self.layer, self.head)
    }
}

pub type ConstraintSet = BTreeMap<HeadId, AttentionConstraint>;

/// A pattern pinned to one head; the constraint is rebuilt per document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub layer: usize,
    pub head: usize,
    #[serde(default = "default_family")]
    pub family: HeadFamily,
    pub pattern: PatternSpec,
}

fn default_family() -> HeadFamily {
    HeadFamily::Encoder
}

impl HeadAssignment {
    pub fn head_id(&self) -> HeadId {
        HeadId {
            layer: self.layer,
            family: self.family,
            head: self.head,
        }
    }
}

/// One gate per head, default 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGates {
    pub encoder: Vec<Vec<f64>>,
    pub pal: Vec<Vec<f64>>,
}

impl HeadGates {
    pub fn filled(model: &Model, value: f64) -> Self {
        let c = &model.config;
        Self {
            encoder: vec![vec![value; c.n_heads]; c.n_layers],
            pal: vec![vec![value; model.n_pal_heads()]; c.n_layers],
        }
    }

    pub fn ones(model: &Model) -> Self {
        Self::filled(model, 1.0)
    }

    pub fn get(&self, h: HeadId) -> f64 {
        match h.family {
            HeadFamily::Encoder => self.encoder[h.layer][h.head],
            HeadFamily::Pal => self.pal[h.layer][h.head],
        }
    }

    pub fn slot_mut(&mut self, h: HeadId) -> Result<&mut f64> {
        let table = match h.family {
            HeadFamily::Encoder => &mut self.encoder,
            HeadFamily::Pal => &mut self.pal,
        };
        table
            .get_mut(h.layer)
            .and_then(|l| l.get_mut(h.head))
            .ok_or_else(|| Error::UnknownHead(h.to_string()))
    }

    pub fn with(mut self, h: HeadId, value: f64) -> Result<Self> {
        *self.slot_mut(h)? = value;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    /// Patterns enforced on specific heads; part of the architecture.
    pub assignments: Vec<HeadAssignment>,
    pub pal: Option<PalConfig>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: Params::init(&config, seed),
            assignments: Vec::new(),
            pal: None,
        })
    }

    /// Initializes a model whose listed heads carry fixed patterns.
    pub fn init_with_patterns(
        config: ModelConfig,
        seed: u64,
        assignments: Vec<HeadAssignment>,
    ) -> Result<Self> {
        let mut model = Self::init(config, seed)?;
        model.set_assignments(assignments)?;
        Ok(model)
    }

    pub fn set_assignments(&mut self, assignments: Vec<HeadAssignment>) -> Result<()> {
        let heads = self.heads();
        let mut seen = std::collections::BTreeSet::new();
        for a in &assignments {
            a.pattern.validate()?;
            let id = a.head_id();
            if !heads.contains(&id) {
                return Err(Error::UnknownHead(id.to_string()));
            }
            if !seen.insert(id) {
                return Err(Error::config("assignments", format!("head {id} assigned twice")));
            }
        }
        self.assignments = assignments;
        Ok(())
    }

    pub fn n_pal_heads(&self) -> usize {
        self.pal.as_ref().map_or(0, |p| p.n_heads)
    }

    /// All heads in canonical order.
    pub fn heads(&self) -> Vec<HeadId> {
        let mut out = Vec::new();
        for layer in 0..self.config.n_layers {
            out.extend((0..self.config.n_heads).map(|h| HeadId::encoder(layer, h)));
            out.extend((0..self.n_pal_heads()).map(|h| HeadId::pal(layer, h)));
        }
        out
    }

    pub fn has_head(&self, h: HeadId) -> bool {
        h.layer < self.config.n_layers
            && match h.family {
                HeadFamily::Encoder => h.head < self.config.n_heads,
                HeadFamily::Pal => h.head < self.n_pal_heads(),
            }
    }

    /// Constraints implied by this model's own pattern assignments.
    pub fn pattern_constraints(&self, doc: &Document) -> ConstraintSet {
        self.assignments
            .iter()
            .map(|a| (a.head_id(), patterns::build_constraint(&a.pattern, doc)))
            .collect()
    }

    /// Dropout-free forward with the model's own constraints and unit gates.
    pub fn analyze(&self, doc: &Document) -> Result<ForwardTrace> {
        self.forward(doc, &self.pattern_constraints(doc), &HeadGates::ones(self))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, m)| m.data.len()).sum()
    }
}

/// Mean binary cross-entropy over sentences, computed from logits.
pub fn loss(trace: &ForwardTrace, labels: &[bool]) -> Result<f64> {
    bce_mean(&trace.logits, labels)
}

pub(crate) fn bce_mean(logits: &[f64], labels: &[bool]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            sentences: logits.len(),
        });
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    Ok(bce_sum(logits, labels) / logits.len() as f64)
}

pub(crate) fn bce_sum(logits: &[f64], labels: &[bool]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| if y { softplus(-z) } else { softplus(z) })
        .sum()
}
