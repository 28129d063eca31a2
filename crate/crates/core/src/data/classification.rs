use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{CLS_ID, NUM_RESERVED};
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 2;

/// How a synthetic sequence's label is derived from its content.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LabelRule {
    /// Parity of the most frequent id (ties go to the smallest id).
    MajorityToken,
    /// Parity of the sum of ids.
    Parity,
}

impl FromStr for LabelRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority_token" => Ok(LabelRule::MajorityToken),
            "parity" => Ok(LabelRule::Parity),
            other => Err(Error::InvalidArgument(format!("unknown label rule `{other}`"))),
        }
    }
}

impl LabelRule {
    pub fn label(self, content: &[u32]) -> u32 {
        match self {
            LabelRule::MajorityToken => {
                let mut sorted = content.to_vec();
                sorted.sort_unstable();
                let mut best = (0usize, u32::MAX);
                for run in sorted.chunk_by(|a, b| a == b) {
                    if run.len() > best.0 {
                        best = (run.len(), run[0]);
                    }
                }
                best.1 % 2
            }
            LabelRule::Parity => (content.iter().map(|&t| t as u64).sum::<u64>() % 2) as u32,
        }
    }
}

/// Fixed-length labelled sequences. Each row starts with the CLS id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabeledDataset {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
    /// Row length including the CLS position.
    pub seq: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }

    /// Tokens and labels of rows `range`.
    pub fn rows(&self, range: std::ops::Range<usize>) -> (&[u32], &[u32]) {
        (
            &self.tokens[range.start * self.seq..range.end * self.seq],
            &self.labels[range],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassificationData {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub rule: LabelRule,
}

/// Generates `size` sequences of `seq` content tokens drawn from
/// `[4, vocab)`, prefixes CLS, labels them with `rule`, and splits 90/10.
///
/// For [`LabelRule::MajorityToken`] each sequence plants a dominant token
/// whose parity is a uniformly drawn class, so classes are balanced.
pub fn make_synthetic_classification(
    size: usize,
    seq: usize,
    vocab: usize,
    rule: LabelRule,
    seed: u64,
) -> Result<ClassificationData> {
    if size == 0 || seq == 0 {
        return Err(Error::InvalidArgument("size and seq must be positive".into()));
    }
    if vocab < NUM_RESERVED as usize + 2 {
        return Err(Error::InvalidArgument(format!(
            "vocab {vocab} leaves fewer than two content ids"
        )));
    }
    let lo = NUM_RESERVED;
    let hi = vocab as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(size * (seq + 1));
    let mut labels = Vec::with_capacity(size);
    let mut content = vec![0u32; seq];
    for _ in 0..size {
        match rule {
            LabelRule::Parity => content.iter_mut().for_each(|t| *t = rng.random_range(lo..hi)),
            LabelRule::MajorityToken => {
                let class = rng.random_range(0..2u32);
                let first = if lo % 2 == class { lo } else { lo + 1 };
                let choices = (hi - first).div_ceil(2);
                let dominant = first + 2 * rng.random_range(0..choices);
                let planted = seq / 4 + 1;
                for (i, t) in content.iter_mut().enumerate() {
                    *t = if i < planted {
                        dominant
                    } else {
                        rng.random_range(lo..hi)
                    };
                }
                for i in (1..seq).rev() {
                    content.swap(i, rng.random_range(0..=i));
                }
            }
        }
        labels.push(rule.label(&content));
        tokens.push(CLS_ID);
        tokens.extend_from_slice(&content);
    }
    let n_train = ((size as f64) * 0.9).round() as usize;
    let row = seq + 1;
    let split = |range: std::ops::Range<usize>| LabeledDataset {
        tokens: tokens[range.start * row..range.end * row].to_vec(),
        labels: labels[range].to_vec(),
        seq: row,
    };
    Ok(ClassificationData {
        train: split(0..n_train),
        validation: split(n_train..size),
        rule,
    })
}
