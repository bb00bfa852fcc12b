//! Projected attention layers: per-layer adapters that add extra,
//! optionally pattern-constrained heads next to each encoder layer.
//!
//! Per layer the adapter is `X·down` (d_model → d_pal), multi-head attention
//! in the projected space, `·wo`, then `·up` (d_pal → d_model). Its output is
//! added to the base layer output. `up` starts at zero, so attaching is an
//! exact no-op until training moves it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::importance::{self, ImportanceReport, Method};
use crate::model::{HeadAssignment, HeadFamily, Model, PalParams};
use crate::patterns::PatternSpec;

/// A pattern pinned to one PAL head index in every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PalHeadPattern {
    pub head: usize,
    pub pattern: PatternSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PalConfig {
    /// Adapter width; 0 means `d_model / 2`.
    pub d_pal: usize,
    pub n_heads: usize,
    /// Heads not listed attend freely.
    pub patterns: Vec<PalHeadPattern>,
    /// Train only adapter parameters.
    pub freeze_base: bool,
}

impl Default for PalConfig {
    fn default() -> Self {
        Self {
            d_pal: 0,
            n_heads: 4,
            patterns: Vec::new(),
            freeze_base: false,
        }
    }
}

impl PalConfig {
    /// Width after resolving the `0 = auto` default.
    pub fn resolved_d_pal(&self, d_model: usize) -> usize {
        if self.d_pal == 0 {
            d_model / 2
        } else {
            self.d_pal
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let d_pal = self.resolved_d_pal(d_model);
        if self.n_heads == 0 {
            return Err(Error::config("pal.n_heads", "must be >= 1"));
        }
        if d_pal == 0 || d_pal > d_model {
            return Err(Error::config(
                "pal.d_pal",
                format!("{d_pal} incompatible with d_model {d_model}"),
            ));
        }
        if !d_pal.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "pal.n_heads",
                format!("{} does not divide d_pal {d_pal}", self.n_heads),
            ));
        }
        for p in &self.patterns {
            if p.head >= self.n_heads {
                return Err(Error::config(
                    "pal.patterns",
                    format!("head {} out of range for {} PAL heads", p.head, self.n_heads),
                ));
            }
            p.pattern.validate()?;
        }
        Ok(())
    }

    /// Parameters one adapter adds to one layer.
    pub fn parameters_per_layer(&self, d_model: usize) -> usize {
        let p = self.resolved_d_pal(d_model);
        2 * d_model * p + 4 * p * p
    }
}

/// Returns `model` with one adapter per layer. The adapter's pattern heads are
/// recorded as PAL-family assignments on the returned model.
pub fn attach_pals(model: &Model, config: &PalConfig, seed: u64) -> Result<Model> {
    if model.pal.is_some() {
        return Err(Error::AlreadyAugmented);
    }
    let d_model = model.config.d_model;
    config.validate(d_model)?;
    let mut resolved = config.clone();
    resolved.d_pal = config.resolved_d_pal(d_model);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    for layer in &mut out.params.layers {
        layer.pal = Some(PalParams::init(d_model, resolved.d_pal, &mut rng));
    }
    out.pal = Some(resolved);

    let mut assignments = model.assignments.clone();
    for layer in 0..model.config.n_layers {
        for p in &config.patterns {
            assignments.push(HeadAssignment {
                layer,
                head: p.head,
                family: HeadFamily::Pal,
                pattern: p.pattern.clone(),
            });
        }
    }
    out.set_assignments(assignments)?;
    Ok(out)
}

/// Importance over encoder and PAL heads together.
pub fn pal_head_importance(model: &Model, dataset: &Dataset, method: Method) -> Result<ImportanceReport> {
    importance::estimate(model, dataset, method)
}
