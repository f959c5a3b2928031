//! Byte-level text corpora with a fixed train / held-out split.
//!
//! The bundled corpus is generated from a small stochastic English grammar,
//! so it is reproducible from a seed and has enough structure (spelling,
//! agreement, phrase order) for a tiny model to learn.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::error::{CuaError, Result};
use crate::rng::{rng_from, Rng};

/// Default generated corpus size in bytes.
pub const DEFAULT_CORPUS_BYTES: usize = 1 << 20;
/// Fraction of the corpus used for training; the tail is held out.
/// Generator seed of the bundled corpus.
pub const BUNDLED_SEED: u64 = 0x5eed;
pub const TRAIN_FRACTION: f64 = 0.9;

const SUBJECTS: &[&str] = &[
    "the cat", "a dog", "my friend", "the old man", "the teacher", "a small bird", "the farmer", "her brother",
    "the children", "a young woman", "the captain", "our neighbour", "the miller", "a tired horse",
];
const PLURAL_SUBJECTS: &[&str] = &["the children", "the farmers", "two dogs", "the sailors", "my parents"];
const VERBS: &[(&str, &str)] = &[
    ("sees", "see"),
    ("likes", "like"),
    ("follows", "follow"),
    ("finds", "find"),
    ("watches", "watch"),
    ("carries", "carry"),
    ("remembers", "remember"),
    ("calls", "call"),
    ("helps", "help"),
    ("paints", "paint"),
];
const OBJECTS: &[&str] = &[
    "the red box", "a long letter", "the river", "an apple", "the little boat", "a green field", "the key",
    "the bread", "a quiet song", "the garden gate", "a map of the town", "the winter coat",
];
const PLACES: &[&str] = &[
    "near the house", "in the morning", "by the sea", "under the bridge", "after dinner", "at the market",
    "in the rain", "on the hill", "before noon", "behind the mill",
];
const CONNECTIVES: &[&str] = &["and then", "but later", "so", "because"];

fn capitalise(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn clause(rng: &mut Rng) -> String {
    let plural = rng.random_bool(0.25);
    let subj = if plural { PLURAL_SUBJECTS.choose(rng) } else { SUBJECTS.choose(rng) }.unwrap();
    let (sing, bare) = VERBS.choose(rng).unwrap();
    let verb = if plural { bare } else { sing };
    let obj = OBJECTS.choose(rng).unwrap();
    if rng.random_bool(0.4) {
        format!("{subj} {verb} {obj} {}", PLACES.choose(rng).unwrap())
    } else {
        format!("{subj} {verb} {obj}")
    }
}

fn sentence(rng: &mut Rng) -> String {
    match rng.random_range(0..10) {
        0..=4 => format!("{}.", capitalise(&clause(rng))),
        5 | 6 => format!("{}, {}.", capitalise(PLACES.choose(rng).unwrap()), clause(rng)),
        7 | 8 => format!("{} {} {}.", capitalise(&clause(rng)), CONNECTIVES.choose(rng).unwrap(), clause(rng)),
        _ => {
            let subj = SUBJECTS.choose(rng).unwrap();
            let (_, bare) = VERBS.choose(rng).unwrap();
            format!("Does {subj} {bare} {}?", OBJECTS.choose(rng).unwrap())
        }
    }
}

/// Deterministic grammar text of exactly `len` bytes.
pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng_from(seed);
    let mut out = String::with_capacity(len + 256);
    while out.len() < len {
        let n = rng.random_range(3..7);
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng));
        }
        out.push('\n');
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    bytes
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub heldout: Vec<u8>,
}

impl Corpus {
    /// Split raw bytes at [`TRAIN_FRACTION`].
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CuaError::InvalidConfig("corpus too small to split".into()));
        }
        let cut = ((bytes.len() as f64) * TRAIN_FRACTION) as usize;
        let mut train = bytes;
        let heldout = train.split_off(cut);
        Ok(Self { train, heldout })
    }

    pub fn synthetic(len: usize, seed: u64) -> Result<Self> {
        Self::from_bytes(synthetic_text(len, seed))
    }

    /// The bundled default corpus.
    pub fn bundled() -> Self {
        Self::synthetic(DEFAULT_CORPUS_BYTES, BUNDLED_SEED).expect("default corpus is large")
    }
}

/// Non-overlapping windows of `window` bytes, at most `max_windows` of them.
pub fn eval_windows(data: &[u8], window: usize, max_windows: usize) -> Vec<&[u8]> {
    data.chunks_exact(window).take(max_windows).collect()
}

/// `batch` windows of `window` bytes at seeded random offsets.
pub fn sample_windows<'a>(data: &'a [u8], window: usize, batch: usize, rng: &mut Rng) -> Vec<&'a [u8]> {
    let hi = data.len().saturating_sub(window);
    (0..batch)
        .map(|_| {
            let s = if hi == 0 { 0 } else { rng.random_range(0..=hi) };
            &data[s..(s + window).min(data.len())]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_text_is_deterministic_ascii() {
        let a = synthetic_text(5000, 1);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_text(5000, 1));
        assert_ne!(a, synthetic_text(5000, 2));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn split_and_windows() {
        let c = Corpus::synthetic(1000, 3).unwrap();
        assert_eq!((c.train.len(), c.heldout.len()), (900, 100));
        assert_eq!(eval_windows(&c.heldout, 30, 10).len(), 3);
        let mut rng = rng_from(0);
        let w = sample_windows(&c.train, 65, 4, &mut rng);
        assert!(w.iter().all(|s| s.len() == 65));
        assert!(Corpus::from_bytes(vec![1, 2]).is_err());
    }
}
