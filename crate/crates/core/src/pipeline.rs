//! End-to-end experiment steps shared by the CLI and the test suites.

use crate::backbone::{Model, ModelConfig};
use crate::baselines::entropy_grid;
use crate::data::{encode_all, split, Encoded, Example, Vocab};
use crate::error::{Error, Result};
use crate::harness::{self, Method, TradeoffPoint};
use crate::par::{self, Execution};
use crate::train::{sweep_tau, train_baseline_heads, train_phase1, SweepCell, TrainConfig};

/// Step between entropy thresholds in a baseline sweep.
pub const ENTROPY_STEP: f64 = 0.05;

/// A dataset split, tokenized with a vocabulary built from its training part.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub model: ModelConfig,
    pub train: Vec<Encoded>,
    pub val: Vec<Encoded>,
}

impl Prepared {
    /// Splits by content hash, builds the vocabulary on the training part
    /// and sizes the embedding table to it.
    pub fn new(examples: &[Example], base: &ModelConfig) -> Result<Self> {
        let (train, val) = split(examples);
        Self::from_parts(&train, &val, Vocab::build(&train), base)
    }

    pub fn from_parts(train: &[Example], val: &[Example], vocab: Vocab, base: &ModelConfig) -> Result<Self> {
        if let Some(ex) = train.iter().chain(val).find(|ex| ex.label >= base.num_classes) {
            return Err(Error::Config(format!(
                "label {} does not fit num_classes = {}",
                ex.label, base.num_classes
            )));
        }
        let model = ModelConfig {
            vocab_size: vocab.len(),
            ..base.clone()
        };
        model.validate()?;
        Ok(Prepared {
            train: encode_all(train, &vocab, model.max_seq_len),
            val: encode_all(val, &vocab, model.max_seq_len),
            vocab,
            model,
        })
    }
}

/// Entropy, patience and static points for one baseline model.
pub fn baseline_points(model: &Model, val: &[Encoded], seed: u64, exec: Execution) -> Result<Vec<TradeoffPoint>> {
    let mut methods: Vec<Method> = entropy_grid(model.config().num_classes, ENTROPY_STEP)
        .into_iter()
        .map(Method::Entropy)
        .collect();
    methods.extend((1..=model.num_blocks()).map(Method::Patience));
    methods.push(Method::Static);
    methods
        .into_iter()
        .map(|m| {
            let mut p = harness::evaluate(model, val, m, exec)?.point;
            p.seed = seed;
            Ok(p)
        })
        .collect()
}

#[derive(Debug)]
pub struct SweepResult {
    pub phase1: Model,
    pub cells: Vec<SweepCell>,
    /// Baseline-head models, one per seed.
    pub baselines: Vec<(u64, Model)>,
    /// DACT points in cell order, then baseline points per seed.
    pub points: Vec<TradeoffPoint>,
}

impl SweepResult {
    /// The trained model of the cell at `(tau, seed)`, if it succeeded.
    pub fn model(&self, tau: f64, seed: u64) -> Option<&Model> {
        self.cells
            .iter()
            .find(|c| c.tau == tau && c.seed == seed)
            .and_then(|c| c.outcome.as_ref().ok())
            .map(|(m, _)| m)
    }
}

/// Phase 1 once with `cfg.seed`, then a tau sweep over `grid x seeds`, and,
/// when `with_baselines`, baseline heads per seed on the frozen phase-1
/// backbone evaluated over the entropy and patience grids.
pub fn run_sweep(
    data: &Prepared,
    cfg: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
    with_baselines: bool,
) -> Result<SweepResult> {
    let mut phase1 = Model::new(data.model.clone(), cfg.seed)?;
    train_phase1(&mut phase1, &data.train, cfg)?;
    let cells = sweep_tau(&phase1, &data.train, &data.val, cfg, grid, seeds)?;
    let mut points: Vec<TradeoffPoint> = cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().map(|(_, p)| p.clone()))
        .collect();

    let mut baselines = Vec::new();
    if with_baselines {
        let inner = TrainConfig {
            exec: Execution::Sequential,
            ..cfg.clone()
        };
        let trained = par::map(cfg.exec, seeds, |&seed| -> Result<_> {
            let mut m = phase1.clone();
            train_baseline_heads(&mut m, &data.train, &TrainConfig { seed, ..inner.clone() })?;
            let pts = baseline_points(&m, &data.val, seed, Execution::Sequential)?;
            Ok((seed, m, pts))
        });
        for r in trained {
            let (seed, m, pts) = r?;
            points.extend(pts);
            baselines.push((seed, m));
        }
    }
    Ok(SweepResult {
        phase1,
        cells,
        baselines,
        points,
    })
}
