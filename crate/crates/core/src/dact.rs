//! Differentiable adaptive computation time over transformer blocks.
//!
//! After block `n` a readout produces a class distribution `y_n` and a
//! halting value `h_n`. They are folded into an accumulated answer:
//!
//! ```text
//! a_n = y_n * p_{n-1} + a_{n-1} * (1 - p_{n-1})
//! p_n = p_{n-1} * h_n
//! ```
//!
//! starting from `a_0 = 0`, `p_0 = 1`. Training always unrolls every block and
//! minimizes `CE(a_N, label) + tau * sum(h_n)`. At inference the loop stops
//! as soon as no choice of future readouts can change `argmax(a)`.

use crate::backbone::{BlockRunner, Model};
use crate::error::{Error, Result};
use crate::tensor::{ParamGrads, Tape, Var};

/// Output of one block's heads.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockReadout {
    /// Class distribution.
    pub y: Vec<f64>,
    /// Halting value in `(0, 1)`.
    pub h: f64,
}

/// Accumulated answer `a`, remaining halting probability `p` and the number
/// of blocks folded in so far.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltingState {
    pub a: Vec<f64>,
    pub p: f64,
    pub n: usize,
}

impl HaltingState {
    pub fn initial(num_classes: usize) -> Self {
        HaltingState {
            a: vec![0.0; num_classes],
            p: 1.0,
            n: 0,
        }
    }

    /// Argmax of `a`, lowest index on ties.
    pub fn prediction(&self) -> usize {
        argmax(&self.a)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Top class and runner-up of `a`. Both use lowest-index tie breaking.
pub fn top_two(a: &[f64]) -> Result<(usize, usize)> {
    if a.len() < 2 {
        return Err(Error::contract(format!(
            "runner-up needs at least 2 classes, got {}",
            a.len()
        )));
    }
    let top = argmax(a);
    let mut ru = if top == 0 { 1 } else { 0 };
    for (i, &x) in a.iter().enumerate() {
        if i != top && x > a[ru] {
            ru = i;
        }
    }
    Ok((top, ru))
}

/// One step of the accumulation recurrence. The answer is mixed with the
/// incoming `p`; `p` is updated afterwards.
pub fn dact_step(state: &HaltingState, r: &BlockReadout) -> HaltingState {
    let p = state.p;
    let keep = 1.0 - p;
    let a = r.y.iter().zip(&state.a).map(|(y, a)| y * p + a * keep).collect();
    HaltingState {
        a,
        p: p * r.h,
        n: state.n + 1,
    }
}

/// True when `d` further steps cannot overturn the current top class even
/// in the worst case: `a[top] * (1 - p)^d >= a[runner_up] + p * d`.
/// `state.p` must already include the current block's halting value.
pub fn halting_bound_holds(state: &HaltingState, d: usize) -> Result<bool> {
    let (top, ru) = top_two(&state.a)?;
    let lowest_top = state.a[top] * (1.0 - state.p).powi(d as i32);
    let highest_ru = state.a[ru] + state.p * d as f64;
    Ok(lowest_top >= highest_ru)
}

/// Simulates `d` adversarial steps against every challenger class: each
/// step emits a one-hot `y` on the challenger and `h = 1` so `p` never
/// shrinks. Returns true iff the top class survives every step of every
/// simulation.
pub fn adversarial_bound_audit(state: &HaltingState, d: usize) -> bool {
    let top = state.prediction();
    let c = state.a.len();
    (0..c).filter(|&k| k != top).all(|challenger| {
        let mut y = vec![0.0; c];
        y[challenger] = 1.0;
        let r = BlockReadout { y, h: 1.0 };
        let mut s = state.clone();
        (0..d).all(|_| {
            s = dact_step(&s, &r);
            s.prediction() == top
        })
    })
}

/// Result of auditing randomly drawn states that satisfy the bound.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditSummary {
    /// States for which the bound held and the audit ran.
    pub checked: usize,
    /// States drawn in total, including rejected ones.
    pub drawn: usize,
    pub failures: Vec<(HaltingState, usize)>,
}

/// Draws random `(a, p, d)` triples until `samples` of them satisfy the
/// halting bound and audits each one. `a` is a softmax of Gaussian logits
/// with a random temperature, `p` is skewed towards 0 and `d` is uniform in
/// `1..=max_remaining`.
pub fn audit_random_states(
    seed: u64,
    samples: usize,
    num_classes: usize,
    max_remaining: usize,
) -> Result<AuditSummary> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    if num_classes < 2 || max_remaining == 0 {
        return Err(Error::contract("audit needs at least 2 classes and 1 remaining block"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut summary = AuditSummary {
        checked: 0,
        drawn: 0,
        failures: Vec::new(),
    };
    let limit = samples.saturating_mul(10_000).max(10_000);
    while summary.checked < samples {
        if summary.drawn >= limit {
            return Err(Error::contract(format!(
                "only {} of {samples} draws satisfied the bound",
                summary.checked
            )));
        }
        summary.drawn += 1;
        let scale = rng.gen_range(0.0..12.0);
        let logits: Vec<f64> = (0..num_classes)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut a = vec![0.0; num_classes];
        crate::tensor::softmax_slice(&logits, None, &mut a);
        let state = HaltingState {
            a,
            p: rng.gen::<f64>().powi(4),
            n: 1,
        };
        let d = rng.gen_range(1..=max_remaining);
        if halting_bound_holds(&state, d)? {
            summary.checked += 1;
            if !adversarial_bound_audit(&state, d) {
                summary.failures.push((state, d));
            }
        }
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    /// Sum of the halting values of every executed block.
    pub ponder_penalty: f64,
    pub tau: f64,
    /// `task_loss + tau * ponder_penalty`.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingForward {
    pub state: HaltingState,
    pub loss: LossBreakdown,
    pub readouts: Vec<BlockReadout>,
}

/// One row of an inference trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    /// 1-based block number.
    pub block: usize,
    pub y: Vec<f64>,
    pub h: f64,
    pub p: f64,
    pub a: Vec<f64>,
    pub bound: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveOutcome {
    pub prediction: usize,
    pub layers_used: usize,
    pub state: HaltingState,
    pub trace: Vec<TraceStep>,
}

/// Readout of block `block` (0-based) on a classification-token row `[1, D]`.
pub(crate) fn readout_on(tape: &mut Tape, model: &Model, cls: Var, block: usize) -> Result<(Var, Var)> {
    let hp = model.head(block);
    let logits = model.linear(tape, cls, hp.out_w, hp.out_b)?;
    let y = tape.softmax(logits)?;
    let z = model.linear(tape, cls, hp.halt_w, hp.halt_b)?;
    let h = tape.sigmoid(z);
    Ok((y, h))
}

/// Readout of block `block` (0-based) on a raw classification-token state.
pub fn block_readout(model: &Model, cls_state: &[f64], block: usize) -> Result<BlockReadout> {
    if block >= model.num_blocks() {
        return Err(Error::Index {
            what: "block",
            index: block,
            bound: model.num_blocks(),
        });
    }
    let mut tape = Tape::no_grad();
    let cls = tape.constant(vec![1, cls_state.len()], cls_state.to_vec())?;
    let (y, h) = readout_on(&mut tape, model, cls, block)?;
    Ok(BlockReadout {
        y: tape.value(y).to_vec(),
        h: tape.item(h),
    })
}

#[derive(Clone, Copy)]
struct TapeState {
    a: Var,
    p: Var,
}

impl TapeState {
    fn initial(tape: &mut Tape, num_classes: usize) -> Result<Self> {
        Ok(TapeState {
            a: tape.constant(vec![1, num_classes], vec![0.0; num_classes])?,
            p: tape.constant(vec![1, 1], vec![1.0])?,
        })
    }

    /// Same arithmetic as [`dact_step`], recorded on the tape.
    fn step(self, tape: &mut Tape, y: Var, h: Var) -> Result<Self> {
        let fresh = tape.mul_scalar(y, self.p)?;
        let keep = tape.affine(self.p, -1.0, 1.0);
        let old = tape.mul_scalar(self.a, keep)?;
        let a = tape.add(fresh, old)?;
        let p = tape.mul(self.p, h)?;
        Ok(TapeState { a, p })
    }

    fn snapshot(&self, tape: &Tape, n: usize) -> HaltingState {
        HaltingState {
            a: tape.value(self.a).to_vec(),
            p: tape.item(self.p),
            n,
        }
    }
}

struct Unrolled<'m> {
    runner: BlockRunner<'m>,
    state: TapeState,
    halts: Vec<Var>,
    readouts: Vec<BlockReadout>,
}

/// Runs every block, folding each readout into the accumulated answer.
fn unroll<'m>(model: &'m Model, tape: Tape, ids: &[usize]) -> Result<Unrolled<'m>> {
    let mut runner = BlockRunner::new(model, tape, ids)?;
    let mut state = TapeState::initial(runner.tape_mut(), model.config().num_classes)?;
    let mut halts = Vec::with_capacity(model.num_blocks());
    let mut readouts = Vec::with_capacity(model.num_blocks());
    for b in 0..model.num_blocks() {
        let cls = runner.next_block()?;
        let tape = runner.tape_mut();
        let (y, h) = readout_on(tape, model, cls, b)?;
        state = state.step(tape, y, h)?;
        readouts.push(BlockReadout {
            y: tape.value(y).to_vec(),
            h: tape.item(h),
        });
        halts.push(h);
    }
    Ok(Unrolled {
        runner,
        state,
        halts,
        readouts,
    })
}

struct LossVars {
    total: Var,
    breakdown: LossBreakdown,
}

fn loss_on(tape: &mut Tape, state: TapeState, halts: &[Var], label: usize, tau: f64) -> Result<LossVars> {
    let task = tape.cross_entropy(state.a, &[label])?;
    let mut ponder = tape.sum(halts[0]);
    for &h in &halts[1..] {
        let s = tape.sum(h);
        ponder = tape.add(ponder, s)?;
    }
    let weighted = tape.scale(ponder, tau);
    let total = tape.add(task, weighted)?;
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            task_loss: tape.item(task),
            ponder_penalty: tape.item(ponder),
            tau,
            total: tape.item(total),
        },
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::contract(format!(
            "tau must be a finite non-negative value, got {tau}"
        )));
    }
    Ok(())
}

/// Training-path forward: all blocks, final accumulated answer and the
/// ponder-regularized loss. Records values only.
pub fn forward_training(model: &Model, ids: &[usize], label: usize, tau: f64) -> Result<TrainingForward> {
    check_tau(tau)?;
    let mut u = unroll(model, Tape::no_grad(), ids)?;
    let n = model.num_blocks();
    let tape = u.runner.tape_mut();
    let loss = loss_on(tape, u.state, &u.halts, label, tau)?;
    Ok(TrainingForward {
        state: u.state.snapshot(tape, n),
        loss: loss.breakdown,
        readouts: u.readouts,
    })
}

/// Loss and parameter gradients for one example.
pub fn dact_gradients(model: &Model, ids: &[usize], label: usize, tau: f64) -> Result<(LossBreakdown, ParamGrads)> {
    check_tau(tau)?;
    let u = unroll(model, Tape::new(), ids)?;
    let mut tape = u.runner.into_tape();
    let loss = loss_on(&mut tape, u.state, &u.halts, label, tau)?;
    let grads = tape.backward(loss.total)?;
    Ok((loss.breakdown, tape.param_grads(&grads, model.params.len())))
}

/// Full-depth accumulated answer and readouts, without a loss.
pub fn forward_full(model: &Model, ids: &[usize]) -> Result<(HaltingState, Vec<BlockReadout>)> {
    let u = unroll(model, Tape::no_grad(), ids)?;
    Ok((u.state.snapshot(u.runner.tape(), model.num_blocks()), u.readouts))
}

/// Adaptive inference: after each block, fold in its readout and stop once
/// the halting bound holds for the remaining `N - n` blocks.
pub fn forward_adaptive(model: &Model, ids: &[usize]) -> Result<AdaptiveOutcome> {
    let total = model.num_blocks();
    let mut runner = BlockRunner::new(model, Tape::no_grad(), ids)?;
    let mut state = TapeState::initial(runner.tape_mut(), model.config().num_classes)?;
    let mut trace = Vec::new();
    for b in 0..total {
        let cls = runner.next_block()?;
        let tape = runner.tape_mut();
        let (y, h) = readout_on(tape, model, cls, b)?;
        state = state.step(tape, y, h)?;
        let snap = state.snapshot(tape, b + 1);
        let bound = halting_bound_holds(&snap, total - (b + 1))?;
        trace.push(TraceStep {
            block: b + 1,
            y: tape.value(y).to_vec(),
            h: tape.item(h),
            p: snap.p,
            a: snap.a.clone(),
            bound,
        });
        if bound || b + 1 == total {
            return Ok(AdaptiveOutcome {
                prediction: snap.prediction(),
                layers_used: b + 1,
                state: snap,
                trace,
            });
        }
    }
    unreachable!("model has at least one block")
}
