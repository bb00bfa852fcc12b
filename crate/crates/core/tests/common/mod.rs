#![allow(dead_code)]

use std::sync::Arc;

use headwise::corpus::{synth_raw, Dataset, Document, SynthConfig, TokenId};
use headwise::model::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_config(n_layers: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model: 8,
        d_ff: 16,
        max_len: 64,
        vocab_size: 64,
        dropout: 0.0,
    }
}

/// Random labelled documents over token ids `4..vocab`, with a small
/// alphabet so repeats are common.
pub fn random_docs(seed: u64, n: usize, vocab: u32) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|d| {
            let n_sents = rng.gen_range(1..=4);
            let sents: Vec<Vec<TokenId>> = (0..n_sents)
                .map(|_| (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(4..vocab)).collect())
                .collect();
            let mut doc = Document::from_sentences(format!("r{d}"), sents, vec![]);
            doc.oracle_labels = Some((0..n_sents).map(|_| rng.gen_bool(0.5)).collect());
            doc
        })
        .collect()
}

pub fn dataset_of(docs: Vec<Document>) -> Dataset {
    Dataset {
        split: "test".into(),
        documents: docs,
        vocab: Arc::new(SynthConfig::default().vocab()),
        max_len: 64,
    }
}

/// Perturbs every parameter, so zero-initialized tensors carry signal.
pub fn jitter(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, m) in model.params.named_mut() {
        for x in &mut m.data {
            *x += rng.gen_range(-scale..scale);
        }
    }
}

pub fn synth_splits(n_train: usize, n_valid: usize, seed: u64) -> (Dataset, Dataset) {
    let cfg = SynthConfig {
        n_docs: n_train,
        sents_per_doc: 4,
        tokens_per_sent: 5,
        vocab_size: 60,
        ..SynthConfig::default()
    };
    let vocab = Arc::new(cfg.vocab());
    let train = Dataset::from_raw("train", &synth_raw(&cfg, seed).unwrap(), vocab.clone(), 64, 3).unwrap();
    let vcfg = SynthConfig { n_docs: n_valid, ..cfg };
    let valid = Dataset::from_raw("valid", &synth_raw(&vcfg, seed + 1).unwrap(), vocab, 64, 3).unwrap();
    (train, valid)
}
