//! Heuristic early-exit criteria over the same per-block output heads:
//! entropy of the current head's distribution, and patience (agreement of
//! consecutive heads). Halting heads are unused here.

use std::fmt;

use crate::backbone::{BlockRunner, Model};
use crate::dact::{argmax, readout_on};
use crate::error::{Error, Result};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineConfig {
    /// Exit once the head's entropy (nats) drops below the threshold.
    Entropy { threshold: f64 },
    /// Exit once the prediction has been unchanged for `patience` blocks.
    Patience { patience: usize },
}

impl BaselineConfig {
    pub fn validate(&self, num_blocks: usize) -> Result<()> {
        match *self {
            BaselineConfig::Entropy { threshold } if threshold.is_nan() || threshold < 0.0 => Err(Error::Config(
                format!("entropy threshold must be non-negative, got {threshold}"),
            )),
            BaselineConfig::Patience { patience } if patience < 1 || patience > num_blocks => Err(Error::Config(
                format!("patience must be in [1, {num_blocks}], got {patience}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for BaselineConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineConfig::Entropy { threshold } => write!(f, "entropy({threshold})"),
            BaselineConfig::Patience { patience } => write!(f, "patience({patience})"),
        }
    }
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(y: &[f64]) -> f64 {
    -y.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

pub fn entropy_halt(y: &[f64], threshold: f64) -> bool {
    entropy(y) < threshold
}

/// True iff the last `patience + 1` predictions exist and agree.
pub fn patience_halt(history: &[usize], patience: usize) -> bool {
    if history.len() < patience + 1 {
        return false;
    }
    let tail = &history[history.len() - patience - 1..];
    tail.iter().all(|&c| c == tail[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutcome {
    pub prediction: usize,
    pub layers_used: usize,
    /// Output distribution of every executed head.
    pub outputs: Vec<Vec<f64>>,
}

/// Runs blocks until the criterion fires or every block has run; predicts
/// with the head of the exit block.
pub fn forward_baseline(model: &Model, ids: &[usize], cfg: BaselineConfig) -> Result<BaselineOutcome> {
    cfg.validate(model.num_blocks())?;
    let total = model.num_blocks();
    let mut runner = BlockRunner::new(model, Tape::no_grad(), ids)?;
    let mut history = Vec::with_capacity(total);
    let mut outputs = Vec::with_capacity(total);
    for b in 0..total {
        let cls = runner.next_block()?;
        let tape = runner.tape_mut();
        let (y, _) = readout_on(tape, model, cls, b)?;
        let y = tape.value(y).to_vec();
        history.push(argmax(&y));
        let halt = match cfg {
            BaselineConfig::Entropy { threshold } => entropy_halt(&y, threshold),
            BaselineConfig::Patience { patience } => patience_halt(&history, patience),
        };
        outputs.push(y);
        if halt || b + 1 == total {
            return Ok(BaselineOutcome {
                prediction: history[b],
                layers_used: b + 1,
                outputs,
            });
        }
    }
    unreachable!("model has at least one block")
}

/// Entropy thresholds `0, step, 2*step, ...` up to and including the first
/// value at or above `ln(num_classes)`, past which every input exits at the
/// first block.
pub fn entropy_grid(num_classes: usize, step: f64) -> Vec<f64> {
    let max = (num_classes as f64).ln();
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let t = (k as f64 * step * 1e6).round() / 1e6;
        out.push(t);
        if t >= max {
            break;
        }
        k += 1;
    }
    out
}
