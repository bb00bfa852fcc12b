//! Vocabulary, document encoding with sentence markers, JSON Lines I/O and the
//! seeded synthetic corpus.
//!
//! Every sentence is wrapped as `<bos> tokens… <eos>` in the flat sequence the
//! encoder consumes; `spans[s]` is the half-open range of sentence `s` in that
//! sequence, markers included.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rouge;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

pub fn is_special(id: TokenId) -> bool {
    id == PAD || id == BOS || id == EOS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list (reserved tokens are
    /// prepended and must not appear in `tokens`).
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into))
            .collect();
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::config("vocab.tokens", "must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::config("vocab.tokens", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps one already-lowercased word; reserved spellings in raw text are
    /// treated as unknown so they cannot forge sentence markers.
    fn lookup_word(&self, word: &str) -> TokenId {
        match self.index.get(word) {
            Some(&id) if id > EOS => id,
            _ => UNK,
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).map(|w| self.lookup_word(&w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .map_err(|e| Error::json("vocab", e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        Self::from_full_list(file.tokens)
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Frequency-ranked vocabulary over lowercase whitespace tokens. Ties break
/// lexicographically; reserved ids occupy `0..4`.
pub fn build_vocab<I, S>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < RESERVED.len() + 1 {
        return Err(Error::config("max_size", "must be at least 5"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for word in tokenize(text.as_ref()) {
            if RESERVED.contains(&word.as_str()) {
                continue;
            }
            *counts.entry(word).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocab::from_tokens(ranked.into_iter().map(|(w, _)| w))
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub sentences: Vec<String>,
    pub summary: Vec<String>,
}

impl RawDocument {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.sentences
            .iter()
            .chain(&self.summary)
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end).contains(&pos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Vec<TokenId>>,
    pub flat: Vec<TokenId>,
    pub spans: Vec<Span>,
    pub gold_summary: Vec<Vec<TokenId>>,
    pub oracle_labels: Option<Vec<bool>>,
}

impl Document {
    /// Builds the flat sequence and spans from already-encoded sentences.
    pub fn from_sentences(
        id: impl Into<String>,
        sentences: Vec<Vec<TokenId>>,
        gold_summary: Vec<Vec<TokenId>>,
    ) -> Self {
        let mut flat = Vec::with_capacity(sentences.iter().map(|s| s.len() + 2).sum());
        let mut spans = Vec::with_capacity(sentences.len());
        for s in &sentences {
            let start = flat.len();
            flat.push(BOS);
            flat.extend_from_slice(s);
            flat.push(EOS);
            spans.push(Span {
                start,
                end: flat.len(),
            });
        }
        Self {
            id: id.into(),
            sentences,
            flat,
            spans,
            gold_summary,
            oracle_labels: None,
        }
    }

    /// Number of non-PAD positions.
    pub fn len(&self) -> usize {
        self.flat.iter().take_while(|&&t| t != PAD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Position of each sentence's BOS marker.
    pub fn bos_positions(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }

    /// Sentence index owning each flat position.
    pub fn sentence_of(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.len()];
        for (s, span) in self.spans.iter().enumerate() {
            for o in &mut owner[span.start..span.end] {
                *o = s;
            }
        }
        owner
    }

    /// Document-local frequency of every non-special token.
    pub fn token_frequencies(&self) -> HashMap<TokenId, usize> {
        let mut freq = HashMap::new();
        for &t in &self.flat[..self.len()] {
            if !is_special(t) {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        freq
    }

    pub fn gold_tokens(&self) -> Vec<TokenId> {
        self.gold_summary.iter().flatten().copied().collect()
    }

    pub fn labels(&self) -> Result<&[bool]> {
        self.oracle_labels
            .as_deref()
            .ok_or_else(|| Error::MissingLabels(self.id.clone()))
    }

    pub fn to_raw(&self, vocab: &Vocab) -> RawDocument {
        RawDocument {
            id: self.id.clone(),
            sentences: self.sentences.iter().map(|s| vocab.decode(s)).collect(),
            summary: self.gold_summary.iter().map(|s| vocab.decode(s)).collect(),
        }
    }
}

/// Lowercases, whitespace-splits and wraps each sentence in BOS/EOS; whole
/// sentences are dropped from the tail until the flat length fits `max_len`.
/// Blank sentences are skipped.
pub fn encode_document(raw: &RawDocument, vocab: &Vocab, max_len: usize) -> Result<Document> {
    let mut sentences: Vec<Vec<TokenId>> = raw
        .sentences
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| vocab.encode_text(s))
        .collect();
    if sentences.is_empty() {
        return Err(Error::NoSentences(raw.id.clone()));
    }
    let mut total = 0;
    let mut keep = 0;
    for s in &sentences {
        if total + s.len() + 2 > max_len {
            break;
        }
        total += s.len() + 2;
        keep += 1;
    }
    if keep == 0 {
        return Err(Error::DocumentExceedsTruncation);
    }
    sentences.truncate(keep);
    let gold = raw
        .summary
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| vocab.encode_text(s))
        .collect();
    Ok(Document::from_sentences(raw.id.clone(), sentences, gold))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: String,
    pub documents: Vec<Document>,
    pub vocab: Arc<Vocab>,
    pub max_len: usize,
}

impl Dataset {
    /// Encodes raw documents and attaches greedy-oracle labels.
    pub fn from_raw(
        split: impl Into<String>,
        raws: &[RawDocument],
        vocab: Arc<Vocab>,
        max_len: usize,
        oracle_sents: usize,
    ) -> Result<Self> {
        let documents = raws
            .iter()
            .map(|raw| {
                let mut doc = encode_document(raw, &vocab, max_len).map_err(|e| match e {
                    Error::DocumentExceedsTruncation => Error::config(
                        format!("document {}", raw.id),
                        "first sentence exceeds the truncation length",
                    ),
                    other => other,
                })?;
                doc.oracle_labels = Some(rouge::greedy_oracle(&doc, oracle_sents));
                Ok(doc)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            split: split.into(),
            documents,
            vocab,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn check_invariants(&self) -> Result<()> {
        for d in &self.documents {
            if d.flat.len() > self.max_len {
                return Err(Error::Shape(format!("document {} exceeds max_len", d.id)));
            }
            if d.flat.iter().any(|&t| t as usize >= self.vocab.len()) {
                return Err(Error::Shape(format!("document {} has out-of-vocab ids", d.id)));
            }
        }
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawDocument>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::json("jsonl", e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub sents_per_doc: usize,
    pub tokens_per_sent: usize,
    pub vocab_size: usize,
    pub repeat_signal: bool,
    /// Sentences copied into each gold summary.
    pub summary_sents: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_docs: 100,
            sents_per_doc: 6,
            tokens_per_sent: 8,
            vocab_size: 500,
            repeat_signal: true,
            summary_sents: 2,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_docs", self.n_docs),
            ("sents_per_doc", self.sents_per_doc),
            ("tokens_per_sent", self.tokens_per_sent),
            ("summary_sents", self.summary_sents),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.vocab_size < RESERVED.len() + 1 {
            return Err(Error::config("vocab_size", "must exceed the reserved tokens"));
        }
        if self.repeat_signal && self.sents_per_doc * self.tokens_per_sent < 2 {
            return Err(Error::config(
                "tokens_per_sent",
                "repeat_signal needs at least two token slots per document",
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_tokens((0..self.vocab_size - RESERVED.len()).map(|i| format!("w{i}")))
            .expect("generated vocabulary is well formed")
    }
}

/// Generates raw documents over the words `w0…`. With `repeat_signal`, a few
/// key words are planted in two or more sentences and the gold summary is made
/// of the sentences carrying the most planted occurrences (document order on
/// ties). Filler words are distinct within a document whenever the
/// vocabulary is large enough, so every repeat is a planted one.
pub fn synth_raw(config: &SynthConfig, seed: u64) -> Result<Vec<RawDocument>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = config.vocab_size - RESERVED.len();
    let slots = config.sents_per_doc * config.tokens_per_sent;
    let mut docs = Vec::with_capacity(config.n_docs);
    let mut pool: Vec<usize> = (0..words).collect();

    for d in 0..config.n_docs {
        let mut sents: Vec<Vec<usize>> = if config.repeat_signal && words >= slots {
            pool.shuffle(&mut rng);
            pool[..slots]
                .chunks(config.tokens_per_sent)
                .map(<[usize]>::to_vec)
                .collect()
        } else {
            (0..config.sents_per_doc)
                .map(|_| {
                    (0..config.tokens_per_sent)
                        .map(|_| rng.gen_range(0..words))
                        .collect()
                })
                .collect()
        };

        let summary_idx: Vec<usize> = if config.repeat_signal {
            let salience = plant_keys(&mut sents, &mut rng);
            let mut order: Vec<usize> = (0..sents.len()).collect();
            order.sort_by(|&a, &b| salience[b].cmp(&salience[a]).then(a.cmp(&b)));
            order.truncate(config.summary_sents);
            order.sort_unstable();
            order
        } else {
            (0..config.summary_sents.min(sents.len())).collect()
        };

        let render = |s: &[usize]| {
            s.iter()
                .map(|w| format!("w{w}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        docs.push(RawDocument {
            id: format!("synth-{d:05}"),
            sentences: sents.iter().map(|s| render(s)).collect(),
            summary: summary_idx.iter().map(|&i| render(&sents[i])).collect(),
        });
    }
    Ok(docs)
}

/// Plants key words and returns the number of planted occurrences per sentence.
fn plant_keys(sents: &mut [Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n_sents = sents.len();
    let width = sents[0].len();
    let mut planted = vec![vec![false; width]; n_sents];
    let mut salience = vec![0; n_sents];

    if n_sents == 1 {
        // Only an in-sentence repeat is possible.
        let key = sents[0][0];
        sents[0][1] = key;
        planted[0][0] = true;
        planted[0][1] = true;
        salience[0] = 2;
        return salience;
    }

    let n_keys = (n_sents / 2).max(1);
    let mut order: Vec<usize> = (0..n_sents).collect();
    for _ in 0..n_keys {
        // Each key word is an existing filler word copied into other sentences.
        let copies = rng.gen_range(2..=n_sents.min(3));
        order.shuffle(rng);
        let targets = &order[..copies];
        let Some((src_s, src_t)) = free_slot(&planted, targets[0], rng) else {
            continue;
        };
        let key = sents[src_s][src_t];
        planted[src_s][src_t] = true;
        salience[src_s] += 1;
        for &s in &targets[1..] {
            if let Some((_, t)) = free_slot(&planted, s, rng) {
                sents[s][t] = key;
                planted[s][t] = true;
                salience[s] += 1;
            }
        }
    }
    salience
}

fn free_slot(planted: &[Vec<bool>], s: usize, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let free: Vec<usize> = (0..planted[s].len()).filter(|&t| !planted[s][t]).collect();
    free.choose(rng).map(|&t| (s, t))
}

/// Generates a labelled synthetic dataset over the full generated vocabulary.
pub fn synth_generate(config: &SynthConfig, seed: u64, max_len: usize, oracle_sents: usize) -> Result<Dataset> {
    let raws = synth_raw(config, seed)?;
    Dataset::from_raw("synth", &raws, Arc::new(config.vocab()), max_len, oracle_sents)
}
