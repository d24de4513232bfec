//! Examples, vocabulary, the synthetic task generator and TSV I/O.

pub mod synthetic;
pub mod tsv;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use tsv::{load_tsv, read_tsv, save_tsv, write_tsv, TsvSchema};
pub use vocab::{trim_padding, Vocab, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Schema(format!("unknown difficulty tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
    pub difficulty: Option<Difficulty>,
}

/// A tokenized example ready for the model: trailing padding removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub label: usize,
    pub difficulty: Option<Difficulty>,
}

pub fn encode_all(examples: &[Example], vocab: &Vocab, max_len: usize) -> Vec<Encoded> {
    examples
        .iter()
        .map(|ex| Encoded {
            ids: trim_padding(&vocab.tokenize(ex, max_len)).to_vec(),
            label: ex.label,
            difficulty: ex.difficulty,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// Percentage of content-hash buckets assigned to validation.
pub const VALIDATION_PERCENT: u64 = 20;

/// Assigns a split from a hash of the example text, so identical content
/// always lands on the same side.
pub fn split_of(ex: &Example) -> Split {
    let mut h = Fnv1a::new();
    h.write(ex.text_a.as_bytes());
    h.write(b"\t");
    if let Some(b) = &ex.text_b {
        h.write(b.as_bytes());
    }
    if h.finish() % 100 < VALIDATION_PERCENT {
        Split::Validation
    } else {
        Split::Train
    }
}

pub fn split(examples: &[Example]) -> (Vec<Example>, Vec<Example>) {
    examples.iter().cloned().partition(|ex| split_of(ex) == Split::Train)
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        let mut h = Fnv1a::new();
        h.write(b"a");
        assert_eq!(h.finish(), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn split_is_disjoint_and_content_keyed() {
        let spec = SyntheticSpec::default();
        let data = gen_synthetic(3, 500, &spec).unwrap();
        let (train, val) = split(&data);
        assert_eq!(train.len() + val.len(), 500);
        assert!(!val.is_empty() && !train.is_empty());
        for v in &val {
            assert!(!train.iter().any(|t| t.text_a == v.text_a && t.text_b == v.text_b));
        }
    }
}
