//! Mixed-difficulty synthetic classification tasks.
//!
//! The `marker-depth` family draws sequences of filler tokens `a`..`h`.
//! Easy examples carry a class marker `m<k>` in the first three positions.
//! Hard examples carry no marker; instead `cues` class tokens `c<k>` are
//! scattered through the sequence, each naming the true label with
//! probability `cue_fidelity` and a uniformly chosen other class otherwise.
//! Hard labels are therefore only probable given the input, never certain.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Difficulty, Example};
use crate::error::{Error, Result};

pub const FAMILIES: [&str; 1] = ["marker-depth"];

const FILLER: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];
const MARKER_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub family: String,
    pub num_classes: usize,
    /// Tokens per example (before `[CLS]`).
    pub seq_len: usize,
    /// Fraction of examples tagged easy.
    pub easy_ratio: f64,
    /// Cue tokens per hard example.
    pub cues: usize,
    /// Probability that a cue names the true label.
    pub cue_fidelity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            family: "marker-depth".into(),
            num_classes: 2,
            seq_len: 12,
            easy_ratio: 0.7,
            cues: 5,
            cue_fidelity: 0.65,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !FAMILIES.contains(&self.family.as_str()) {
            return Err(Error::Config(format!(
                "unknown synthetic family `{}` (known: {})",
                self.family,
                FAMILIES.join(", ")
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.easy_ratio) {
            return Err(Error::Config("easy_ratio must be in [0, 1]".into()));
        }
        let chance = 1.0 / self.num_classes as f64;
        if !(self.cue_fidelity > chance && self.cue_fidelity <= 1.0) {
            return Err(Error::Config(format!(
                "cue_fidelity must be in ({chance}, 1], got {}",
                self.cue_fidelity
            )));
        }
        if self.cues == 0 || self.cues > self.seq_len || self.seq_len < MARKER_WINDOW {
            return Err(Error::Config(format!(
                "seq_len {} cannot hold {} cues",
                self.seq_len, self.cues
            )));
        }
        Ok(())
    }
}

/// Generates `n` examples. Labels cycle through the classes so counts are
/// balanced within one; the easy/hard assignment is a seeded permutation.
pub fn gen_synthetic(seed: u64, n: usize, spec: &SyntheticSpec) -> Result<Vec<Example>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_easy = (n as f64 * spec.easy_ratio).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut easy = vec![false; n];
    for &i in &order[..n_easy] {
        easy[i] = true;
    }

    let mut out: Vec<Example> = (0..n)
        .map(|i| {
            let label = i % spec.num_classes;
            if easy[i] {
                easy_example(&mut rng, spec, label)
            } else {
                hard_example(&mut rng, spec, label)
            }
        })
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

fn filler(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    (0..len)
        .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
        .collect()
}

fn easy_example(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, label: usize) -> Example {
    let mut toks = filler(rng, spec.seq_len);
    toks[rng.gen_range(0..MARKER_WINDOW)] = format!("m{label}");
    Example {
        text_a: toks.join(" "),
        text_b: None,
        label,
        difficulty: Some(Difficulty::Easy),
    }
}

fn hard_example(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, label: usize) -> Example {
    let mut toks = filler(rng, spec.seq_len);
    let mut slots: Vec<usize> = (0..spec.seq_len).collect();
    slots.shuffle(rng);
    for &slot in &slots[..spec.cues] {
        let k = if rng.gen_bool(spec.cue_fidelity) {
            label
        } else {
            (label + rng.gen_range(1..spec.num_classes)) % spec.num_classes
        };
        toks[slot] = format!("c{k}");
    }
    Example {
        text_a: toks.join(" "),
        text_b: None,
        label,
        difficulty: Some(Difficulty::Hard),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(
            gen_synthetic(7, 200, &spec).unwrap(),
            gen_synthetic(7, 200, &spec).unwrap()
        );
        assert_ne!(
            gen_synthetic(7, 200, &spec).unwrap(),
            gen_synthetic(8, 200, &spec).unwrap()
        );
    }

    #[test]
    fn classes_balanced_and_ratio_respected() {
        let spec = SyntheticSpec::default();
        let data = gen_synthetic(1, 1000, &spec).unwrap();
        let ones = data.iter().filter(|e| e.label == 1).count();
        assert_eq!(ones, 500);
        let easy = data.iter().filter(|e| e.difficulty == Some(Difficulty::Easy)).count();
        assert_eq!(easy, 700);

        let spec3 = SyntheticSpec {
            num_classes: 3,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(1, 100, &spec3).unwrap();
        let counts: Vec<usize> = (0..3).map(|k| data.iter().filter(|e| e.label == k).count()).collect();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn examples_encode_their_label() {
        let spec = SyntheticSpec::default();
        for ex in gen_synthetic(5, 300, &spec).unwrap() {
            let toks: Vec<&str> = ex.text_a.split_whitespace().collect();
            assert_eq!(toks.len(), spec.seq_len);
            match ex.difficulty.unwrap() {
                Difficulty::Easy => {
                    let m = format!("m{}", ex.label);
                    assert!(toks[..MARKER_WINDOW].contains(&m.as_str()));
                }
                Difficulty::Hard => {
                    let cues = toks.iter().filter(|t| t.starts_with('c') && t.len() == 2).count();
                    assert_eq!(cues, spec.cues);
                    assert!(!toks.iter().any(|t| t.starts_with('m')));
                }
            }
        }
    }

    #[test]
    fn hard_cues_follow_fidelity() {
        let spec = SyntheticSpec {
            easy_ratio: 0.0,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(3, 4000, &spec).unwrap();
        let (mut agree, mut total) = (0usize, 0usize);
        for ex in &data {
            let want = format!("c{}", ex.label);
            for t in ex.text_a.split(' ').filter(|t| t.starts_with('c') && t.len() == 2) {
                total += 1;
                agree += usize::from(t == want);
            }
        }
        let rate = agree as f64 / total as f64;
        assert!((rate - spec.cue_fidelity).abs() < 0.02, "{rate}");
    }

    #[test]
    fn unknown_family_is_config_error() {
        let spec = SyntheticSpec {
            family: "nope".into(),
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic(1, 10, &spec), Err(Error::Config(_))));
    }
}
