//! Two-phase optimization.
//!
//! Phase 1 fits the backbone together with the last block's output head
//! using plain cross-entropy. Phase 2 re-draws every other head and jointly
//! trains backbone and heads on the ponder-regularized DACT loss. Baseline
//! heads are fitted on a frozen phase-1 backbone instead.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BlockRunner, HeadPart, Model};
use crate::config::KvMap;
use crate::dact::{dact_gradients, readout_on};
use crate::data::Encoded;
use crate::error::{Error, Result};
use crate::harness::{self, Method, TradeoffPoint};
use crate::par::{self, Execution};
use crate::tensor::{ParamGrads, ParamStore, Tape};

/// Ponder weights swept by `--grid paper`.
pub const REFERENCE_TAU_GRID: [f64; 5] = [5e-5, 5e-4, 5e-3, 5e-2, 5e-1];

// Seed streams, so that phases and cells never share randomness.
const STREAM_PHASE1: u64 = 1;
const STREAM_PHASE2: u64 = 2;
const STREAM_HEADS: u64 = 3;
const STREAM_BASELINE: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 5e-3,
            lr_phase1: 1e-3,
            lr_phase2: 3e-4,
            epochs_phase1: 8,
            epochs_phase2: 6,
            batch_size: 8,
            seed: 0,
            grad_clip: 1.0,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 8] = [
        "tau",
        "lr_phase1",
        "lr_phase2",
        "epochs_phase1",
        "epochs_phase2",
        "batch_size",
        "seed",
        "grad_clip",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be non-negative, got {}", self.tau)));
        }
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("tau", self.tau);
        kv.set("lr_phase1", self.lr_phase1);
        kv.set("lr_phase2", self.lr_phase2);
        kv.set("epochs_phase1", self.epochs_phase1);
        kv.set("epochs_phase2", self.epochs_phase2);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("grad_clip", self.grad_clip);
    }

    pub fn merged(&self, kv: &KvMap) -> Result<Self> {
        let mut c = self.clone();
        kv.update("tau", &mut c.tau)?;
        kv.update("lr_phase1", &mut c.lr_phase1)?;
        kv.update("lr_phase2", &mut c.lr_phase2)?;
        kv.update("epochs_phase1", &mut c.epochs_phase1)?;
        kv.update("epochs_phase2", &mut c.epochs_phase2)?;
        kv.update("batch_size", &mut c.batch_size)?;
        kv.update("seed", &mut c.seed)?;
        kv.update("grad_clip", &mut c.grad_clip)?;
        c.validate()?;
        Ok(c)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adam moments for every parameter of one model.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState, lr: f64) {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t);
    let bc2 = 1.0 - state.beta2.powi(state.t);
    for (id, g) in grads.iter() {
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let w = &mut params.get_mut(id).data;
        for i in 0..g.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
}

/// Per-epoch record of one training phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    /// Parameters that received at least one nonzero gradient entry.
    pub touched: Vec<bool>,
}

impl TrainReport {
    fn new(num_params: usize) -> Self {
        TrainReport {
            touched: vec![false; num_params],
            ..Default::default()
        }
    }

    fn mark(&mut self, grads: &ParamGrads) {
        for (id, g) in grads.iter() {
            if g.iter().any(|&v| v != 0.0) {
                self.touched[id.0] = true;
            }
        }
    }
}

/// Mean loss and mean gradient over `batch`. Per-example work may run in
/// parallel; the reduction is sequential in batch order.
fn batch_gradients<T, F>(exec: Execution, model: &Model, batch: &[&T], f: F) -> Result<(f64, ParamGrads)>
where
    T: Sync,
    F: Fn(&Model, &T) -> Result<(f64, ParamGrads)> + Sync + Send,
{
    let results = par::map(exec, batch, |ex| f(model, ex));
    let mut total = ParamGrads::new(model.params.len());
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

fn clip(grads: &mut ParamGrads, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
}

struct Loop<'a, T> {
    phase: &'static str,
    data: &'a [T],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    grad_clip: f64,
    exec: Execution,
    rng: ChaCha8Rng,
}

impl<T: Sync> Loop<'_, T> {
    fn run<F>(mut self, model: &mut Model, f: F) -> Result<TrainReport>
    where
        F: Fn(&Model, &T) -> Result<(f64, ParamGrads)> + Sync + Send,
    {
        let mut report = TrainReport::new(model.params.len());
        if self.epochs == 0 || self.data.is_empty() {
            return Ok(report);
        }
        let mut adam = AdamState::new(&model.params);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        for epoch in 0..self.epochs {
            order.shuffle(&mut self.rng);
            let mut sum = 0.0;
            let mut batches = 0;
            for (step, chunk) in order.chunks(self.batch_size).enumerate() {
                let batch: Vec<&T> = chunk.iter().map(|&i| &self.data[i]).collect();
                let (loss, mut grads) = batch_gradients(self.exec, model, &batch, &f)?;
                if !loss.is_finite() || !grads.global_norm().is_finite() {
                    return Err(Error::Divergence {
                        phase: self.phase,
                        epoch,
                        step,
                        loss,
                    });
                }
                report.mark(&grads);
                clip(&mut grads, self.grad_clip);
                adam_step(&mut model.params, &grads, &mut adam, self.lr);
                report.step_losses.push(loss);
                sum += loss;
                batches += 1;
            }
            report.epoch_losses.push(sum / batches as f64);
        }
        Ok(report)
    }
}

/// Cross-entropy of the last block's output head; gradients reach the
/// backbone and that head only.
pub fn final_head_gradients(model: &Model, ids: &[usize], label: usize) -> Result<(f64, ParamGrads)> {
    let mut runner = BlockRunner::new(model, Tape::new(), ids)?;
    let mut cls = runner.next_block()?;
    while runner.blocks_done() < model.num_blocks() {
        cls = runner.next_block()?;
    }
    let mut tape = runner.into_tape();
    let (y, _) = readout_on(&mut tape, model, cls, model.num_blocks() - 1)?;
    let loss = tape.cross_entropy(y, &[label])?;
    let value = tape.item(loss);
    let grads = tape.backward(loss)?;
    Ok((value, tape.param_grads(&grads, model.params.len())))
}

/// Phase 1: backbone plus the last output head, plain cross-entropy.
pub fn train_phase1(model: &mut Model, data: &[Encoded], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    Loop {
        phase: "phase 1",
        data,
        epochs: cfg.epochs_phase1,
        batch_size: cfg.batch_size,
        lr: cfg.lr_phase1,
        grad_clip: cfg.grad_clip,
        exec: cfg.exec,
        rng: rng_for(cfg.seed, STREAM_PHASE1),
    }
    .run(model, |m, ex| final_head_gradients(m, &ex.ids, ex.label))
}

/// Re-draws every head except the last block's output head, which phase 1
/// trained.
pub fn reinit_auxiliary_heads(model: &mut Model, seed: u64) {
    let last = model.num_blocks() - 1;
    let mut rng = rng_for(seed, STREAM_HEADS);
    let head_seed = rand::Rng::gen::<u64>(&mut rng);
    model.reinit_heads(head_seed, |b, part| !(b == last && part == HeadPart::Output));
}

/// Phase 2: joint training of backbone and all heads on
/// `CE(a_N) + tau * sum(h)`, starting from a phase-1 model.
pub fn train_phase2(model: &mut Model, data: &[Encoded], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    reinit_auxiliary_heads(model, cfg.seed);
    let tau = cfg.tau;
    Loop {
        phase: "phase 2",
        data,
        epochs: cfg.epochs_phase2,
        batch_size: cfg.batch_size,
        lr: cfg.lr_phase2,
        grad_clip: cfg.grad_clip,
        exec: cfg.exec,
        rng: rng_for(cfg.seed, STREAM_PHASE2),
    }
    .run(model, |m, ex| {
        dact_gradients(m, &ex.ids, ex.label, tau).map(|(l, g)| (l.total, g))
    })
}

/// Classification-token state of every block for one example, computed on a
/// frozen backbone.
fn cached_cls(model: &Model, exec: Execution, data: &[Encoded]) -> Result<Vec<Vec<Vec<f64>>>> {
    par::map(exec, data, |ex| {
        let states = model.encode(&ex.ids)?;
        Ok((0..model.num_blocks()).map(|b| states.cls(b).to_vec()).collect())
    })
    .into_iter()
    .collect()
}

/// Fits every block's output head with its own cross-entropy (summed over
/// blocks) while the backbone stays frozen. Heads other than the last are
/// re-drawn first, exactly as in phase 2.
pub fn train_baseline_heads(model: &mut Model, data: &[Encoded], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    reinit_auxiliary_heads(model, cfg.seed);
    let cache = cached_cls(model, cfg.exec, data)?;
    let items: Vec<(usize, usize)> = data.iter().map(|ex| ex.label).enumerate().collect();
    let d = model.config().hidden_dim;
    Loop {
        phase: "baseline heads",
        data: &items,
        epochs: cfg.epochs_phase2,
        batch_size: cfg.batch_size,
        lr: cfg.lr_phase2,
        grad_clip: cfg.grad_clip,
        exec: cfg.exec,
        rng: rng_for(cfg.seed, STREAM_BASELINE),
    }
    .run(model, |m, &(index, label)| {
        let states = &cache[index];
        let mut tape = Tape::new();
        let mut total = None;
        for (b, cls) in states.iter().enumerate() {
            let cls = tape.constant(vec![1, d], cls.clone())?;
            let (y, _) = readout_on(&mut tape, m, cls, b)?;
            let ce = tape.cross_entropy(y, &[label])?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        let total = total.expect("at least one block");
        let value = tape.item(total);
        let grads = tape.backward(total)?;
        Ok((value, tape.param_grads(&grads, m.params.len())))
    })
}

/// One sweep cell: a phase-2 run at `tau` with head seed `seed`.
#[derive(Debug)]
pub struct SweepCell {
    pub tau: f64,
    pub seed: u64,
    pub outcome: Result<(Model, TradeoffPoint)>,
}

/// Phase 2 from the same phase-1 model for every `(tau, seed)` pair, each
/// evaluated with adaptive inference on `val`. A failing cell is recorded
/// and the sweep continues.
pub fn sweep_tau(
    phase1: &Model,
    train: &[Encoded],
    val: &[Encoded],
    cfg: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs a non-empty tau grid and seed list".into()));
    }
    let cells: Vec<(f64, u64)> = grid.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    // Cells run in parallel; each cell is internally sequential.
    let inner = TrainConfig {
        exec: Execution::Sequential,
        ..cfg.clone()
    };
    Ok(par::map(cfg.exec, &cells, |&(tau, seed)| {
        let outcome = (|| {
            let mut model = phase1.clone();
            let cell_cfg = TrainConfig {
                tau,
                seed,
                ..inner.clone()
            };
            train_phase2(&mut model, train, &cell_cfg)?;
            let mut point = harness::evaluate(&model, val, Method::Dact, Execution::Sequential)?.point;
            point.knob = tau;
            point.seed = seed;
            Ok((model, point))
        })();
        SweepCell { tau, seed, outcome }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamId, Tensor};

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        s
    }

    fn grad(g: f64) -> ParamGrads {
        let mut pg = ParamGrads::new(1);
        pg.set(ParamId(0), vec![g]);
        pg
    }

    #[test]
    fn adam_zero_grad_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(0.0), &mut st, 0.1);
        assert_eq!(s.get(ParamId(0)).data[0], 0.7);
    }

    #[test]
    fn adam_first_step_opposes_gradient() {
        for g in [2.5, -0.01] {
            let mut s = scalar_store(0.0);
            let mut st = AdamState::new(&s);
            adam_step(&mut s, &grad(g), &mut st, 0.01);
            let w = s.get(ParamId(0)).data[0];
            assert!(w * g < 0.0);
            // Bias correction makes the first step ~lr in magnitude.
            assert!((w.abs() - 0.01).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_two_step_scalar_trace() {
        // Hand trace with g1 = 0.5, g2 = -1.0, lr = 0.1, w0 = 1.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
        let m1 = (1.0 - b1) * 0.5;
        let v1 = (1.0 - b2) * 0.25;
        let w1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + -(1.0 - b1);
        let v2 = b2 * v1 + (1.0 - b2) * 1.0;
        let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &grad(0.5), &mut st, lr);
        assert!((s.get(ParamId(0)).data[0] - w1).abs() < 1e-15);
        adam_step(&mut s, &grad(-1.0), &mut st, lr);
        assert!((s.get(ParamId(0)).data[0] - w2).abs() < 1e-15);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn clip_rescales_to_ceiling() {
        let mut g = ParamGrads::new(1);
        g.set(ParamId(0), vec![3.0, 4.0]);
        clip(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut g2 = ParamGrads::new(1);
        g2.set(ParamId(0), vec![0.3, 0.4]);
        clip(&mut g2, 1.0);
        assert_eq!(g2.get(ParamId(0)).unwrap(), &[0.3, 0.4]);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig {
            tau: 0.5,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut kv = KvMap::new();
        cfg.write_kv(&mut kv);
        assert_eq!(TrainConfig::default().merged(&kv).unwrap(), cfg);
        let mut bad = KvMap::new();
        bad.set("tau", -1.0);
        assert!(TrainConfig::default().merged(&bad).is_err());
    }
}
