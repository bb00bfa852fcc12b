//! Run configuration: one TOML file with `[model]`, `[data]`, `[train]`,
//! `[patterns]` and `[pal]` sections, plus dotted `key=value` overrides.
//!
//! Every field has a default, so an empty file is a valid configuration and
//! every key exists for overriding. Unknown keys are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, read_jsonl, synth_raw, Dataset, SynthConfig, Vocab};
use crate::error::{Error, Result};
use crate::model::{HeadAssignment, Model, ModelConfig};
use crate::pal::PalConfig;
use crate::patterns::DEFAULT_ALPHA;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON Lines files; both empty selects the synthetic generator.
    pub train: String,
    pub valid: String,
    /// Vocabulary file; empty builds one from the training split.
    pub vocab: String,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Maximum sentences the greedy oracle labels per document.
    pub oracle_sents: usize,
    pub seed: u64,
    pub valid_docs: usize,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: String::new(),
            valid: String::new(),
            vocab: String::new(),
            vocab_size: 500,
            max_len: 128,
            oracle_sents: 3,
            seed: 0,
            valid_docs: 200,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternsConfig {
    /// Significance level of the per-head t-test.
    pub alpha: f64,
    /// Encoder or PAL heads carrying a fixed pattern from initialization.
    pub assignments: Vec<HeadAssignment>,
}

impl Default for PatternsConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            assignments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub patterns: PatternsConfig,
    pub pal: PalConfig,
}

fn parse_error(field: &str, e: impl std::fmt::Display) -> Error {
    Error::config(field, e.to_string().trim().replace('\n', " "))
}

/// Parses the right-hand side of an override as a TOML value; bare words
/// fall back to strings.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to an existing key. Unknown paths are errors.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let mut node = root;
    for part in key.split('.') {
        node = node
            .get_mut(part)
            .ok_or_else(|| Error::config(key, "unknown configuration key"))?;
    }
    let value = override_value(raw.trim());
    let value = match (&*node, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    if std::mem::discriminant(node) != std::mem::discriminant(&value) {
        return Err(Error::config(
            key,
            format!("expected {}, got {}", node.type_str(), value.type_str()),
        ));
    }
    *node = value;
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = toml::from_str(text).map_err(|e| parse_error("config", e))?;
        if overrides.is_empty() {
            base.validate()?;
            return Ok(base);
        }
        let mut value = toml::Value::try_from(&base).map_err(|e| parse_error("config", e))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: RunConfig = value.try_into().map_err(|e| parse_error("config", e))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (absent path means defaults) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pal.validate(self.model.d_model)?;
        if !(self.patterns.alpha > 0.0 && self.patterns.alpha < 1.0) {
            return Err(Error::config("patterns.alpha", "must lie in (0, 1)"));
        }
        let d = &self.data;
        if d.train.is_empty() != d.valid.is_empty() {
            return Err(Error::config("data.valid", "train and valid must be given together"));
        }
        if d.max_len > self.model.max_len {
            return Err(Error::config("data.max_len", "exceeds model.max_len"));
        }
        if d.valid_docs < 2 {
            return Err(Error::config("data.valid_docs", "must be >= 2"));
        }
        Ok(())
    }

    pub fn uses_synth(&self) -> bool {
        self.data.train.is_empty()
    }

    /// Fresh model with the configured pattern assignments, seeded from
    /// `train.seed`.
    pub fn build_model(&self) -> Result<Model> {
        Model::init_with_patterns(self.model, self.train.seed, self.patterns.assignments.clone())
    }

    fn resolve(base: &Path, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Train and validation splits. File paths resolve against `base`.
    pub fn datasets(&self, base: &Path) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train_raw, valid_raw, vocab) = if self.uses_synth() {
            let train = synth_raw(&d.synth, d.seed)?;
            let valid_cfg = SynthConfig {
                n_docs: d.valid_docs,
                ..d.synth.clone()
            };
            let mut valid = synth_raw(&valid_cfg, d.seed.wrapping_add(1))?;
            for doc in &mut valid {
                doc.id = doc.id.replacen("synth", "synth-valid", 1);
            }
            (train, valid, d.synth.vocab())
        } else {
            let train = read_jsonl(&Self::resolve(base, &d.train))?;
            let valid = read_jsonl(&Self::resolve(base, &d.valid))?;
            let vocab = if d.vocab.is_empty() {
                build_vocab(train.iter().flat_map(|r| r.texts()), d.vocab_size)?
            } else {
                Vocab::load(&Self::resolve(base, &d.vocab))?
            };
            (train, valid, vocab)
        };
        if vocab.len() > self.model.vocab_size {
            return Err(Error::config(
                "model.vocab_size",
                format!("vocabulary has {} tokens", vocab.len()),
            ));
        }
        let vocab = Arc::new(vocab);
        let train = Dataset::from_raw("train", &train_raw, vocab.clone(), d.max_len, d.oracle_sents)?;
        let valid = Dataset::from_raw("valid", &valid_raw, vocab, d.max_len, d.oracle_sents)?;
        Ok((train, valid))
    }

    /// One split by name: `train` or `valid`.
    pub fn split(&self, base: &Path, name: &str) -> Result<Dataset> {
        let (train, valid) = self.datasets(base)?;
        match name {
            "train" => Ok(train),
            "valid" => Ok(valid),
            other => Err(Error::config("split", format!("unknown split {other:?}"))),
        }
    }

    /// Copy with data file paths made absolute against `base`, so the text
    /// can be written anywhere and still load.
    pub fn with_absolute_paths(&self, base: &Path) -> Self {
        let mut out = self.clone();
        for p in [&mut out.data.train, &mut out.data.valid, &mut out.data.vocab] {
            if !p.is_empty() {
                *p = Self::resolve(base, p).to_string_lossy().into_owned();
            }
        }
        out
    }
}
