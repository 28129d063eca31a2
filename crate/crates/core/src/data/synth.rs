//! Deterministic English-like text for desk-scale pretraining when no real
//! corpus is at hand.
//!
//! Text is built from a pseudo-word lexicon with Zipfian word frequencies,
//! a handful of sentence templates with number agreement, and paragraphs
//! that favour a small set of topic nouns. Paragraphs are separated by blank
//! lines so that they act as documents.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "ch", "cl", "dr",
    "fl", "gr", "pl", "pr", "sh", "sl", "st", "th", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "oo", "ou"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "s", "t", "m", "nd", "rk", "st", "ng"];

const DETERMINERS: &[&str] = &["the", "a", "every", "some", "this", "that", "one"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "under", "near", "with", "beyond", "behind", "across", "from", "into",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "although", "so"];
const PRONOUNS: &[&str] = &["it", "she", "he", "they", "we"];

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    adverbs: Vec<String>,
    zipf: [WeightedIndex<f64>; 4],
}

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
    w
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / (r as f64 + 1.0).powf(1.1))).expect("positive weights")
}

impl Lexicon {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut words = |n: usize, suffix: &str, rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let syl = rng.random_range(1..=3);
                let w = format!("{}{suffix}", pseudo_word(rng, syl));
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let nouns = words(600, "", rng);
        let verbs = words(300, "", rng);
        let adjectives = words(200, "y", rng);
        let adverbs = words(80, "ly", rng);
        let zipf = [
            zipf(nouns.len()),
            zipf(verbs.len()),
            zipf(adjectives.len()),
            zipf(adverbs.len()),
        ];
        Self {
            nouns,
            verbs,
            adjectives,
            adverbs,
            zipf,
        }
    }
}

struct Writer<'l> {
    lex: &'l Lexicon,
    rng: ChaCha8Rng,
    topic: Vec<usize>,
}

impl Writer<'_> {
    fn pick<'a>(&mut self, list: &'a [&'a str]) -> &'a str {
        list[self.rng.random_range(0..list.len())]
    }

    fn noun_phrase(&mut self, out: &mut Vec<String>) -> bool {
        let plural = self.rng.random_bool(0.3);
        let det = if plural {
            self.pick(&["the", "some", "many", "these", "those"])
        } else {
            self.pick(DETERMINERS)
        };
        out.push(det.to_string());
        if self.rng.random_bool(0.4) {
            let a = self.lex.zipf[2].sample(&mut self.rng);
            out.push(self.lex.adjectives[a].clone());
        }
        let n = if self.rng.random_bool(0.5) {
            self.topic[self.rng.random_range(0..self.topic.len())]
        } else {
            self.lex.zipf[0].sample(&mut self.rng)
        };
        let noun = &self.lex.nouns[n];
        out.push(if plural { format!("{noun}s") } else { noun.clone() });
        plural
    }

    fn verb(&mut self, plural: bool, out: &mut Vec<String>) {
        if self.rng.random_bool(0.2) {
            let a = self.lex.zipf[3].sample(&mut self.rng);
            out.push(self.lex.adverbs[a].clone());
        }
        let v = &self.lex.verbs[self.lex.zipf[1].sample(&mut self.rng)];
        out.push(if plural { v.clone() } else { format!("{v}s") });
    }

    fn clause(&mut self, out: &mut Vec<String>) {
        let plural = if self.rng.random_bool(0.15) {
            let p = self.pick(PRONOUNS);
            out.push(p.to_string());
            matches!(p, "they" | "we")
        } else {
            self.noun_phrase(out)
        };
        self.verb(plural, out);
        if self.rng.random_bool(0.7) {
            self.noun_phrase(out);
        }
        if self.rng.random_bool(0.5) {
            out.push(self.pick(PREPOSITIONS).to_string());
            self.noun_phrase(out);
        }
    }

    fn sentence(&mut self) -> String {
        let mut words = Vec::new();
        self.clause(&mut words);
        if self.rng.random_bool(0.3) {
            let last = words.pop().expect("clause is non-empty");
            words.push(format!("{last},"));
            words.push(self.pick(CONJUNCTIONS).to_string());
            self.clause(&mut words);
        }
        let mut s = words.join(" ");
        if let Some(first) = s.get(0..1) {
            s.replace_range(0..1, &first.to_uppercase());
        }
        s.push(if self.rng.random_bool(0.9) { '.' } else { '?' });
        s
    }

    fn paragraph(&mut self) -> String {
        self.topic = (0..3)
            .map(|_| self.rng.random_range(0..self.lex.nouns.len() / 4))
            .collect();
        let n = self.rng.random_range(3..=7);
        (0..n).map(|_| self.sentence()).collect::<Vec<_>>().join(" ")
    }
}

/// At least `min_bytes` of text, deterministic in `seed`.
pub fn synthetic_text(min_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::new(&mut rng);
    let mut w = Writer {
        lex: &lex,
        rng,
        topic: Vec::new(),
    };
    let mut out = String::with_capacity(min_bytes + 1024);
    while out.len() < min_bytes {
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(&w.paragraph());
    }
    out.push('\n');
    out
}
