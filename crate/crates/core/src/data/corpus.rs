use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
/// Number of reserved ids; ordinary tokens start here.
pub const NUM_RESERVED: u32 = 4;
pub const VALIDATION_FRACTION: f64 = 0.005;

const RESERVED: [&str; 4] = ["<pad>", "<mask>", "<unk>", "<cls>"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum TokenScheme {
    #[default]
    Char,
    WhitespaceWord,
}

impl FromStr for TokenScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenScheme::Char),
            "whitespace_word" | "word" => Ok(TokenScheme::WhitespaceWord),
            other => Err(Error::InvalidArgument(format!("unknown token scheme `{other}`"))),
        }
    }
}

/// Rank-ordered token list with reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `cap - 4` most frequent tokens, ties broken
    /// lexicographically.
    fn build<'t>(tokens: impl Iterator<Item = &'t str>, cap: usize) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - NUM_RESERVED as usize);
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(NUM_RESERVED as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in rank order, with `\n`, `\t`, `\r` and `\\`
    /// escaped.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            for c in t.chars() {
                match c {
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    '\\' => out.push_str("\\\\"),
                    c => out.push(c),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// A tokenized corpus split into training documents and a held-out span.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    train: Vec<u32>,
    /// Start offset of each training document within `train`.
    doc_starts: Vec<usize>,
    validation: Vec<u32>,
    vocab: Vocabulary,
    scheme: TokenScheme,
    source: String,
    seed: u64,
}

impl Corpus {
    pub fn from_file(path: impl AsRef<Path>, scheme: TokenScheme, vocab_cap: usize, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::InvalidArgument(format!("{} is not UTF-8: {e}", path.display())))?;
        Self::from_text(&text, scheme, vocab_cap, seed, &path.display().to_string())
    }

    /// Tokenizes `text`, builds the vocabulary, and holds out a random
    /// contiguous span of `round(0.005 · tokens)` for validation.
    pub fn from_text(text: &str, scheme: TokenScheme, vocab_cap: usize, seed: u64, source: &str) -> Result<Self> {
        if vocab_cap < NUM_RESERVED as usize + 1 {
            return Err(Error::InvalidArgument(format!(
                "vocab_cap must be at least {}, got {vocab_cap}",
                NUM_RESERVED + 1
            )));
        }
        let (pieces, doc_starts) = split_tokens(text, scheme);
        if pieces.is_empty() {
            return Err(Error::Empty("corpus text has no tokens"));
        }
        let vocab = Vocabulary::build(pieces.iter().copied(), vocab_cap);
        let ids: Vec<u32> = pieces.iter().map(|t| vocab.id(t)).collect();

        let n = ids.len();
        let n_val = (VALIDATION_FRACTION * n as f64).round() as usize;
        let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=n - n_val);
        let end = start + n_val;

        let mut train = Vec::with_capacity(n - n_val);
        let mut train_starts = Vec::new();
        let mut bounds = doc_starts.clone();
        bounds.push(n);
        for w in bounds.windows(2) {
            let pieces = if n_val == 0 {
                [(w[0], w[1]), (0, 0)]
            } else {
                [(w[0], w[1].min(start)), (w[0].max(end), w[1])]
            };
            for (lo, hi) in pieces {
                if lo < hi {
                    train_starts.push(train.len());
                    train.extend_from_slice(&ids[lo..hi]);
                }
            }
        }
        Ok(Self {
            train,
            doc_starts: train_starts,
            validation: ids[start..end].to_vec(),
            vocab,
            scheme,
            source: source.to_string(),
            seed,
        })
    }

    pub fn train(&self) -> &[u32] {
        &self.train
    }

    pub fn validation(&self) -> &[u32] {
        &self.validation
    }

    pub fn doc_starts(&self) -> &[usize] {
        &self.doc_starts
    }

    pub fn num_documents(&self) -> usize {
        self.doc_starts.len()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn scheme(&self) -> TokenScheme {
        self.scheme
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text, self.scheme)
            .0
            .into_iter()
            .map(|t| self.vocab.id(t))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode) for in-vocabulary char text.
    /// Unknown ids render as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if self.scheme == TokenScheme::WhitespaceWord && i > 0 {
                out.push(' ');
            }
            match id {
                id if id >= NUM_RESERVED => out.push_str(self.vocab.token(id).unwrap_or("\u{fffd}")),
                _ => out.push('\u{fffd}'),
            }
        }
        out
    }

    /// Random subset of whole training documents holding at least
    /// `round(fraction · train tokens)` tokens, in original order. The
    /// validation split is untouched.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Corpus> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "subsample fraction {fraction} outside (0, 1]"
            )));
        }
        if fraction == 1.0 {
            return Ok(self.clone());
        }
        let target = (fraction * self.train.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.doc_starts.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = Vec::new();
        let mut total = 0;
        for d in order {
            if total >= target.max(1) {
                break;
            }
            total += self.doc_len(d);
            chosen.push(d);
        }
        chosen.sort_unstable();
        let mut train = Vec::with_capacity(total);
        let mut doc_starts = Vec::with_capacity(chosen.len());
        for d in chosen {
            doc_starts.push(train.len());
            let s = self.doc_starts[d];
            train.extend_from_slice(&self.train[s..s + self.doc_len(d)]);
        }
        let mut source = self.source.clone();
        let _ = write!(source, " [subsample {fraction} seed {seed}]");
        Ok(Corpus {
            train,
            doc_starts,
            validation: self.validation.clone(),
            vocab: self.vocab.clone(),
            scheme: self.scheme,
            source,
            seed: self.seed,
        })
    }

    fn doc_len(&self, d: usize) -> usize {
        let end = self.doc_starts.get(d + 1).copied().unwrap_or(self.train.len());
        end - self.doc_starts[d]
    }
}

/// Splits text into token strings and the index of each document's first
/// token. Documents are separated by blank lines.
fn split_tokens(text: &str, scheme: TokenScheme) -> (Vec<&str>, Vec<usize>) {
    let mut tokens = Vec::new();
    let mut starts = Vec::new();
    match scheme {
        TokenScheme::Char => {
            let mut newlines = 0;
            let mut fresh = true;
            for (i, c) in text.char_indices() {
                if c == '\n' {
                    newlines += 1;
                    if newlines >= 2 {
                        fresh = true;
                    }
                } else if !c.is_whitespace() {
                    newlines = 0;
                    if fresh {
                        starts.push(tokens.len());
                        fresh = false;
                    }
                }
                if starts.is_empty() {
                    starts.push(0);
                    fresh = false;
                }
                tokens.push(&text[i..i + c.len_utf8()]);
            }
        }
        TokenScheme::WhitespaceWord => {
            let mut fresh = true;
            for line in text.lines() {
                if line.trim().is_empty() {
                    fresh = true;
                    continue;
                }
                for w in line.split_whitespace() {
                    if fresh {
                        starts.push(tokens.len());
                        fresh = false;
                    }
                    tokens.push(w);
                }
            }
        }
    }
    (tokens, starts)
}
