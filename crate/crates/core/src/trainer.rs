//! Adam with a warmup/inverse-square-root schedule, seeded training runs with
//! top-k checkpoint retention, and the pattern ablation and distillation
//! comparison harnesses.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::inference::{self, DEFAULT_K};
use crate::model::{bce_sum, Dropout, HeadAssignment, HeadFamily, Model, ModelConfig, Params};
use crate::pal::{attach_pals, PalConfig};
use crate::patterns::PatternSpec;
use crate::rouge::RougeTriple;

/// `peak · min(step^−½, step · warmup^−³ᐟ²)`.
pub fn lr_at(step: usize, warmup: usize, peak: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::ZeroStep);
    }
    if warmup == 0 {
        return Err(Error::config("train.warmup", "must be >= 1"));
    }
    let s = step as f64;
    Ok(peak * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam on flat slices. `t` is the 1-based update count.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, h: AdamHyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + h.eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One update over every tensor. Nothing is modified when any gradient is
/// non-finite.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64, h: AdamHyper) -> Result<()> {
    if grads.named().iter().any(|(_, g)| g.data.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step;
    let grads = grads.named();
    for (((_, p), (_, m)), ((_, v), (_, g))) in params
        .named_mut()
        .into_iter()
        .zip(state.m.named_mut())
        .zip(state.v.named_mut().into_iter().zip(grads))
    {
        adam_update(&mut p.data, &g.data, &mut m.data, &mut v.data, t, lr, h);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub validate_every: usize,
    pub batch_size: usize,
    pub accumulation: usize,
    /// 0 means 10% of `steps`.
    pub warmup: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub top_k: usize,
    /// Sentences per predicted summary during validation and evaluation.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            validate_every: 200,
            batch_size: 8,
            accumulation: 1,
            warmup: 0,
            peak_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            top_k: 3,
            eval_k: DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.validate_every == 0 {
            return Err(Error::config("train.validate_every", "must be >= 1"));
        }
        if self.steps < self.validate_every {
            return Err(Error::config("train.steps", "must be >= validate_every"));
        }
        for (name, v) in [
            ("train.batch_size", self.batch_size),
            ("train.accumulation", self.accumulation),
            ("train.top_k", self.top_k),
            ("train.eval_k", self.eval_k),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(name, "must lie in (0, 1)"));
            }
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("train.peak_lr", "must be positive"));
        }
        // Negated so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        Ok(())
    }

    pub fn resolved_warmup(&self) -> usize {
        if self.warmup == 0 {
            (self.steps / 10).max(1)
        } else {
            self.warmup
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean sentence BCE over the step's documents.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub loss: f64,
    pub rouge: RougeTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub val_loss: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub assignments: Vec<HeadAssignment>,
    pub pal: Option<PalConfig>,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Kept checkpoints, best first.
    pub checkpoints: Vec<CheckpointRecord>,
    pub best_step: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub record: CheckpointRecord,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    /// Top-k by validation loss, best first.
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainOutcome {
    pub fn best(&self) -> &Model {
        &self.checkpoints[0].model
    }
}

pub fn checkpoint_file(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

/// Mean sentence BCE and ROUGE (no blocking) over a labelled split.
pub fn validate(model: &Model, dataset: &Dataset, k: usize) -> Result<ValidationRecord> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = dataset
        .documents
        .par_iter()
        .map(|doc| {
            let labels = doc.labels()?;
            let trace = model.analyze(doc)?;
            let pred = inference::select_summary(&trace.logits, doc, k, false);
            Ok((bce_sum(&trace.logits, labels), labels.len(), inference::score_prediction(&pred, doc)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, mut count) = (0.0, 0usize);
    let mut scores = Vec::with_capacity(rows.len());
    for (l, n, s) in rows {
        loss += l;
        count += n;
        scores.push(s);
    }
    Ok(ValidationRecord {
        step: 0,
        loss: loss / count.max(1) as f64,
        rouge: RougeTriple::mean(&scores),
    })
}

const DROPOUT_SALT: u64 = 0x5eed_d709_0a7e_0001;

/// Sum of per-document gradients (sum-BCE) over `docs` and their sentence
/// count. Documents are reduced in order so the result is reproducible.
fn batch_gradient(model: &Model, dataset: &Dataset, docs: &[usize], seed: u64, step: usize) -> Result<(Params, f64, usize)> {
    let rate = model.config.dropout;
    let parts = docs
        .par_iter()
        .map(|&i| {
            let doc = &dataset.documents[i];
            let labels = doc.labels()?;
            let constraints = model.pattern_constraints(doc);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
            rng.set_stream(((step as u64) << 24) ^ i as u64);
            let dropout = (rate > 0.0).then_some(Dropout { rate, rng: &mut rng });
            let (g, loss) = model.gradients_sum(doc, &constraints, labels, dropout)?;
            Ok((g, loss, labels.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.params.zeros_like();
    let (mut loss, mut count) = (0.0, 0);
    for (g, l, n) in parts {
        total.add_assign(&g);
        loss += l;
        count += n;
    }
    Ok((total, loss, count))
}

fn zero_base_gradients(grads: &mut Params) {
    for (name, m) in grads.named_mut() {
        if !name.contains(".pal.") {
            m.data.fill(0.0);
        }
    }
}

/// Trains `model` in place of a copy and returns the log and the kept
/// checkpoints. Every random choice derives from `config.seed`.
pub fn train_run(model: &Model, train: &Dataset, valid: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for doc in train.documents.iter().chain(&valid.documents) {
        doc.labels()?;
    }
    let freeze_base = model.pal.as_ref().is_some_and(|p| p.freeze_base);
    let warmup = config.resolved_warmup();
    let hyper = config.adam();

    let mut model = model.clone();
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut steps = Vec::with_capacity(config.steps);
    let mut validations = Vec::new();
    let mut kept: Vec<Checkpoint> = Vec::new();

    for step in 1..=config.steps {
        let mut grads = model.params.zeros_like();
        let (mut loss, mut count) = (0.0, 0);
        for _ in 0..config.accumulation {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let (g, l, n) = batch_gradient(&model, train, &batch, config.seed, step)?;
            grads.add_assign(&g);
            loss += l;
            count += n;
        }
        let count = count.max(1) as f64;
        grads.scale(1.0 / count);
        if freeze_base {
            zero_base_gradients(&mut grads);
        }
        let lr = lr_at(step, warmup, config.peak_lr)?;
        adam_step(&mut model.params, &grads, &mut state, lr, hyper)?;
        steps.push(StepRecord {
            step,
            lr,
            loss: loss / count,
        });

        if step % config.validate_every == 0 || step == config.steps {
            let mut record = validate(&model, valid, config.eval_k)?;
            record.step = step;
            let ckpt = Checkpoint {
                record: CheckpointRecord {
                    step,
                    val_loss: record.loss,
                    file: checkpoint_file(step),
                },
                model: model.clone(),
            };
            validations.push(record);
            // Stable insert: an equal loss ranks after the earlier step.
            let pos = kept.partition_point(|c| c.record.val_loss <= ckpt.record.val_loss);
            kept.insert(pos, ckpt);
            kept.truncate(config.top_k);
        }
    }

    let log = RunLog {
        train: config.clone(),
        model: model.config,
        assignments: model.assignments.clone(),
        pal: model.pal.clone(),
        steps,
        validations,
        checkpoints: kept.iter().map(|c| c.record.clone()).collect(),
        best_step: kept[0].record.step,
    };
    Ok(TrainOutcome { log, checkpoints: kept })
}

/// One of the three ablation toggles. `Positional` is the ±1 pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    Matching,
    Intra,
    Positional,
}

impl Toggle {
    pub const ALL: [Toggle; 3] = [Toggle::Matching, Toggle::Intra, Toggle::Positional];

    fn short(&self) -> &'static str {
        match self {
            Toggle::Matching => "m",
            Toggle::Intra => "i",
            Toggle::Positional => "p",
        }
    }

    fn patterns(&self) -> Vec<PatternSpec> {
        match self {
            Toggle::Matching => vec![PatternSpec::matching_token()],
            Toggle::Intra => vec![PatternSpec::intra_sentence()],
            Toggle::Positional => vec![PatternSpec::relative_position(-1), PatternSpec::relative_position(1)],
        }
    }
}

pub fn subset_label(toggles: &[Toggle]) -> String {
    if toggles.is_empty() {
        "none".into()
    } else {
        toggles.iter().map(Toggle::short).collect::<Vec<_>>().join("+")
    }
}

/// Patterns of a toggle subset in canonical order `(m, i, −1, +1)`.
pub fn subset_patterns(toggles: &[Toggle]) -> Vec<PatternSpec> {
    Toggle::ALL
        .iter()
        .filter(|t| toggles.contains(t))
        .flat_map(Toggle::patterns)
        .collect()
}

/// Pattern `p` goes to encoder head `p` of every layer.
pub fn layout_assignments(config: &ModelConfig, patterns: &[PatternSpec]) -> Result<Vec<HeadAssignment>> {
    if patterns.len() > config.n_heads {
        return Err(Error::TooFewHeads {
            needed: patterns.len(),
            available: config.n_heads,
        });
    }
    Ok((0..config.n_layers)
        .flat_map(|layer| {
            patterns.iter().enumerate().map(move |(head, p)| HeadAssignment {
                layer,
                head,
                family: HeadFamily::Encoder,
                pattern: p.clone(),
            })
        })
        .collect())
}

/// All `2³` toggle subsets, empty first, in binary order over `(m, i, p)`.
pub fn all_subsets() -> Vec<Vec<Toggle>> {
    (0..8u8)
        .map(|mask| {
            Toggle::ALL
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, t)| *t)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub name: String,
    pub plain: RougeTriple,
    pub blocked: RougeTriple,
}

fn score_variant(name: String, model: &Model, valid: &Dataset, k: usize) -> Result<VariantScore> {
    Ok(VariantScore {
        name,
        plain: inference::evaluate(model, valid, k, false)?,
        blocked: inference::evaluate(model, valid, k, true)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: String,
    pub toggles: Vec<Toggle>,
    pub score: VariantScore,
    pub delta_plain: RougeTriple,
    pub delta_blocked: RougeTriple,
    pub best_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// Trains a from-scratch model with `patterns` laid out on heads `0..`.
pub fn train_with_patterns(
    model_config: &ModelConfig,
    patterns: &[PatternSpec],
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let assignments = layout_assignments(model_config, patterns)?;
    let model = Model::init_with_patterns(*model_config, config.seed, assignments)?;
    train_run(&model, train, valid, config)
}

/// Trains one model per toggle subset (shared seed) and reports ROUGE deltas
/// against the pattern-free run. `subsets` defaults to all eight.
pub fn ablation_suite(
    model_config: &ModelConfig,
    subsets: Option<&[Vec<Toggle>]>,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<AblationReport> {
    let all = all_subsets();
    let subsets = subsets.unwrap_or(&all);
    for s in subsets {
        layout_assignments(model_config, &subset_patterns(s))?;
    }
    let base = train_with_patterns(model_config, &[], train, valid, config)?;
    let baseline = score_variant(subset_label(&[]), base.best(), valid, config.eval_k)?;
    let mut rows = Vec::with_capacity(subsets.len());
    for toggles in subsets {
        let (score, best_step) = if toggles.is_empty() {
            (baseline.clone(), base.log.best_step)
        } else {
            let run = train_with_patterns(model_config, &subset_patterns(toggles), train, valid, config)?;
            let score = score_variant(subset_label(toggles), run.best(), valid, config.eval_k)?;
            (score, run.log.best_step)
        };
        rows.push(AblationRow {
            subset: subset_label(toggles),
            toggles: toggles.clone(),
            delta_plain: score.plain.minus(&baseline.plain),
            delta_blocked: score.blocked.minus(&baseline.blocked),
            score,
            best_step,
        });
    }
    Ok(AblationReport {
        seed: config.seed,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub seed: u64,
    pub variants: Vec<VariantScore>,
}

/// Baseline, from-scratch pattern injection, and PAL fine-tuning of the
/// trained baseline, all on one seed and schedule.
pub fn distill_compare(
    model_config: &ModelConfig,
    patterns: &[PatternSpec],
    pal: &PalConfig,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<ComparisonReport> {
    let k = config.eval_k;
    let base = train_with_patterns(model_config, &[], train, valid, config)?;
    let injected = train_with_patterns(model_config, patterns, train, valid, config)?;
    let augmented = attach_pals(base.best(), pal, config.seed)?;
    let tuned = train_run(&augmented, train, valid, config)?;
    Ok(ComparisonReport {
        seed: config.seed,
        variants: vec![
            score_variant("baseline".into(), base.best(), valid, k)?,
            score_variant("pattern".into(), injected.best(), valid, k)?,
            score_variant("pal".into(), tuned.best(), valid, k)?,
        ],
    })
}
