//! Character vocabulary, corpus generation and fixed-length batching.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;

/// Closed character vocabulary; id 0 is padding, ids `1..V` are the sorted
/// distinct characters of the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Vocab {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::invalid("cannot build a vocabulary from empty text"));
        }
        let set: BTreeSet<char> = text.chars().collect();
        Ok(Vocab {
            symbols: set.into_iter().collect(),
        })
    }

    /// Size including the padding id.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.symbols.binary_search(&c).ok().map(|i| i + 1)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::invalid(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Inverse of [`Vocab::encode`]; padding ids decode to nothing.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID)
            .map(|&id| {
                self.symbols
                    .get(id - 1)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("token id {id} out of range for V={}", self.size())))
            })
            .collect()
    }
}

/// One batch of `B` windows; `inputs` and `targets` are row-major `[B, S]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Stacks `(input, target)` windows of equal length.
    pub fn from_windows(windows: &[(&[usize], &[usize])]) -> Result<Self> {
        let seq = windows
            .first()
            .map(|w| w.0.len())
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let mut inputs = Vec::with_capacity(windows.len() * seq);
        let mut targets = Vec::with_capacity(windows.len() * seq);
        for (x, y) in windows {
            if x.len() != seq || y.len() != seq {
                return Err(Error::shape("windows of unequal length in one batch"));
            }
            inputs.extend_from_slice(x);
            targets.extend_from_slice(y);
        }
        Ok(Batch {
            inputs,
            targets,
            batch: windows.len(),
            seq,
        })
    }
}

/// Non-overlapping next-token windows over a token sequence, reshuffled
/// every epoch from `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    tokens: Vec<usize>,
    context: usize,
    batch: usize,
    seed: u64,
}

impl BatchStream {
    pub fn new(tokens: Vec<usize>, context: usize, batch: usize, seed: u64) -> Result<Self> {
        if context == 0 || batch == 0 {
            return Err(Error::invalid("context size and batch size must be positive"));
        }
        if tokens.len() < context + 1 {
            return Err(Error::invalid(format!(
                "source of {} tokens is shorter than one window of {}",
                tokens.len(),
                context + 1
            )));
        }
        Ok(BatchStream {
            tokens,
            context,
            batch,
            seed,
        })
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn n_windows(&self) -> usize {
        (self.tokens.len() - 1) / self.context
    }

    /// Full batches per epoch; the remainder is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.n_windows() / self.batch
    }

    /// Window `w` as `(inputs, targets)`.
    pub fn window(&self, w: usize) -> (&[usize], &[usize]) {
        let s = w * self.context;
        (
            &self.tokens[s..s + self.context],
            &self.tokens[s + 1..s + 1 + self.context],
        )
    }

    /// Window order for `epoch`, a seeded permutation.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_windows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Batches of `epoch` as `(window ids, batch)`.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = (Vec<usize>, Batch)> + '_ {
        let order = self.order(epoch);
        let n = self.batches_per_epoch();
        (0..n).map(move |b| {
            let ids = order[b * self.batch..(b + 1) * self.batch].to_vec();
            let windows: Vec<_> = ids.iter().map(|&w| self.window(w)).collect();
            let batch = Batch::from_windows(&windows).expect("windows share the context length");
            (ids, batch)
        })
    }

    /// All windows in source order, chunked into batches of at most `B`
    /// (the last one may be partial). Used for evaluation.
    pub fn sequential(&self) -> Vec<Batch> {
        (0..self.n_windows())
            .collect::<Vec<_>>()
            .chunks(self.batch)
            .map(|ids| {
                let windows: Vec<_> = ids.iter().map(|&w| self.window(w)).collect();
                Batch::from_windows(&windows).expect("windows share the context length")
            })
            .collect()
    }
}

/// Splits tokens into a leading training part and a trailing held-out part.
pub fn split_held_out(tokens: &[usize], held_out: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&held_out) {
        return Err(Error::invalid(format!("held-out fraction {held_out} outside [0, 1)")));
    }
    let cut = tokens.len() - (tokens.len() as f64 * held_out).round() as usize;
    Ok((tokens[..cut].to_vec(), tokens[cut..].to_vec()))
}

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
const PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '\''];

/// Pseudo-English text: a first-order Markov chain over a fixed lexicon of
/// random words, sentence capitalisation and punctuation, plus character
/// noise drawn from the full alphabet.
pub fn synthetic_corpus(len: usize, seed: u64, noise: f64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters: Vec<char> = LETTERS.chars().collect();
    let alphabet: Vec<char> = letters
        .iter()
        .copied()
        .chain(letters.iter().map(|c| c.to_ascii_uppercase()))
        .chain(PUNCT.iter().copied())
        .collect();

    let n_words = 48;
    let lexicon: Vec<String> = (0..n_words)
        .map(|_| {
            let l = rng.random_range(2..=7);
            (0..l).map(|_| letters[rng.random_range(0..letters.len())]).collect()
        })
        .collect();
    let successors: Vec<[usize; 3]> = (0..n_words)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..n_words)))
        .collect();

    let mut out = String::with_capacity(len + 16);
    let mut word = rng.random_range(0..n_words);
    let mut sentence_start = true;
    while out.chars().count() < len {
        let w = &lexicon[word];
        if sentence_start {
            let mut cs = w.chars();
            if let Some(first) = cs.next() {
                out.push(first.to_ascii_uppercase());
                out.extend(cs);
            }
        } else {
            out.push_str(w);
        }
        sentence_start = false;
        let roll: f64 = rng.random();
        if roll < 0.08 {
            out.push(PUNCT[rng.random_range(0..PUNCT.len())]);
            sentence_start = matches!(out.chars().last(), Some('.' | '!' | '?'));
        }
        out.push(' ');
        let pick: f64 = rng.random();
        word = if pick < 0.6 {
            successors[word][0]
        } else if pick < 0.85 {
            successors[word][1]
        } else if pick < 0.97 {
            successors[word][2]
        } else {
            rng.random_range(0..n_words)
        };
    }
    out.chars()
        .take(len)
        .map(|c| {
            if rng.random::<f64>() < noise {
                alphabet[rng.random_range(0..alphabet.len())]
            } else {
                c
            }
        })
        .collect()
}

/// Synthetic corpus whose vocabulary is guaranteed to contain the full
/// alphabet (letters of both cases, punctuation, space).
pub fn full_alphabet_corpus(len: usize, seed: u64, noise: f64) -> String {
    let mut text = synthetic_corpus(len, seed, noise);
    let letters: String = LETTERS
        .chars()
        .chain(LETTERS.to_uppercase().chars())
        .chain(PUNCT.iter().copied())
        .collect();
    text.push(' ');
    text.push_str(&letters);
    text
}
