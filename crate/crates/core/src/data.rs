//! Vocabulary, TSV corpora, synthetic tasks and padded batches.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{rng_for, SeededRng};
use crate::model::Input;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::Input("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Keeps the `max_size − 4` most frequent tokens after the reserved ones,
/// ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if max_size < RESERVED.len() {
        return Err(Error::Input(format!("max_size {max_size} leaves no room for reserved tokens")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(t, _)| !RESERVED.contains(&t.as_str())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size - RESERVED.len()).map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// One labelled line of a TSV corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub label: usize,
    pub text: String,
    pub pair: Option<String>,
}

/// Reads `label<TAB>text` or `label<TAB>text<TAB>text` lines. Blank lines
/// are skipped.
pub fn load_tsv(path: &Path) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let at = || format!("{}:{}", path.display(), i + 1);
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Input(format!("{}: expected 2 or 3 tab-separated fields, found {}", at(), fields.len())));
        }
        let label = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Input(format!("{}: label `{}` is not a non-negative integer", at(), fields[0])))?;
        out.push(RawExample { label, text: fields[1].to_string(), pair: fields.get(2).map(|s| s.to_string()) });
    }
    Ok(out)
}

pub fn write_tsv(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut text = String::new();
    for e in examples {
        if e.text.contains(['\t', '\n']) || e.pair.as_ref().is_some_and(|p| p.contains(['\t', '\n'])) {
            return Err(Error::Input("TSV fields cannot contain tabs or newlines".into()));
        }
        text.push_str(&e.label.to_string());
        text.push('\t');
        text.push_str(&e.text);
        if let Some(p) = &e.pair {
            text.push('\t');
            text.push_str(p);
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Token ids with the `[CLS]` prefix at position 0, and a label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// `[CLS] text… ([SEP] pair…)`, cut to `max_len`.
pub fn encode(raw: &RawExample, vocab: &Vocab, max_len: usize) -> Example {
    let mut ids = vec![CLS];
    ids.extend(tokenize(&raw.text).iter().map(|t| vocab.id(t)));
    if let Some(p) = &raw.pair {
        ids.push(SEP);
        ids.extend(tokenize(p).iter().map(|t| vocab.id(t)));
    }
    ids.truncate(max_len.max(1));
    Example { ids, label: raw.label }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Label 1 iff the trigger token occurs.
    Keyword,
    /// Label is the parity of the number of trigger tokens.
    Parity,
    /// Two segments each hold one of several triggers; label 1 iff they
    /// hold the same one.
    PairMatch,
}

pub const SYNTH_TRIGGERS: usize = 4;
pub const SYNTH_LEN: usize = 12;
const SEGMENT: usize = 5;

/// Smallest vocabulary the synthetic tasks accept.
pub const SYNTH_MIN_VOCAB: usize = RESERVED.len() + SYNTH_TRIGGERS + 2;

/// Deterministic balanced dataset; every sequence starts with `[CLS]`.
/// Triggers are ids `4..8`; other content tokens are drawn from the rest.
pub fn synth_task(kind: SynthKind, size: usize, vocab_size: usize, seed: u64) -> Result<Vec<Example>> {
    if vocab_size < SYNTH_MIN_VOCAB {
        return Err(Error::Input(format!("synthetic tasks need a vocabulary of at least {SYNTH_MIN_VOCAB}")));
    }
    let mut rng = rng_for(seed, &format!("synth-{kind:?}"));
    let first_filler = RESERVED.len() + SYNTH_TRIGGERS;
    let trigger = RESERVED.len();
    let filler = |rng: &mut SeededRng| rng.random_range(first_filler..vocab_size);
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        // Alternating labels keep the classes balanced exactly.
        let label = i % 2;
        let ids = match kind {
            SynthKind::Keyword => {
                let len = rng.random_range(6..=SYNTH_LEN);
                let mut ids: Vec<usize> = std::iter::once(CLS).chain((1..len).map(|_| filler(&mut rng))).collect();
                if label == 1 {
                    let at = rng.random_range(1..len);
                    ids[at] = trigger;
                }
                ids
            }
            SynthKind::Parity => {
                let count = if label == 1 { [1, 3][rng.random_range(0..2)] } else { [0, 2, 4][rng.random_range(0..3)] };
                let mut ids: Vec<usize> = std::iter::once(CLS).chain((1..SYNTH_LEN).map(|_| filler(&mut rng))).collect();
                let mut slots: Vec<usize> = (1..SYNTH_LEN).collect();
                slots.shuffle(&mut rng);
                for &s in &slots[..count] {
                    ids[s] = trigger;
                }
                ids
            }
            SynthKind::PairMatch => {
                let a = rng.random_range(0..SYNTH_TRIGGERS);
                let b = if label == 1 {
                    a
                } else {
                    (a + rng.random_range(1..SYNTH_TRIGGERS)) % SYNTH_TRIGGERS
                };
                let mut ids = vec![CLS];
                for (k, t) in [a, b].into_iter().enumerate() {
                    if k == 1 {
                        ids.push(SEP);
                    }
                    let at = rng.random_range(0..SEGMENT);
                    ids.extend((0..SEGMENT).map(|j| if j == at { trigger + t } else { filler(&mut rng) }));
                }
                ids
            }
        };
        out.push(Example { ids, label });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// A padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Input,
    pub labels: Vec<usize>,
}

/// Pads to the longest row with `[PAD]`, masking the padding.
pub fn make_batch(examples: &[&Example]) -> Result<Batch> {
    let seq = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    if seq == 0 {
        return Err(Error::Input("cannot batch empty sequences".into()));
    }
    let mut ids = Vec::with_capacity(examples.len() * seq);
    let mut mask = Vec::with_capacity(examples.len() * seq);
    for e in examples {
        ids.extend(e.ids.iter().copied().chain(std::iter::repeat(PAD)).take(seq));
        mask.extend((0..seq).map(|j| j < e.ids.len()));
    }
    Ok(Batch {
        input: Input { ids, batch: examples.len(), seq, mask },
        labels: examples.iter().map(|e| e.label).collect(),
    })
}

/// Consecutive batches of `examples` in order.
pub fn sequential_batches(examples: &[Example], batch_size: usize) -> Result<Vec<Batch>> {
    examples.chunks(batch_size.max(1)).map(|c| make_batch(&c.iter().collect::<Vec<_>>())).collect()
}

/// Endless shuffled passes over `n` indices, reshuffled every epoch.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, rng: SeededRng) -> Self {
        let mut s = BatchSampler { order: (0..n).collect(), pos: n, batch_size: batch_size.clamp(1, n.max(1)), rng };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    /// Next batch of indices; a batch never spans two epochs.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        out
    }
}
