//! Pre-norm transformer encoder with a classification token at position 0
//! and one output/halting head pair per block.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KvMap;
use crate::data::vocab::{CLS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 6,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 64,
            max_seq_len: 32,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 7] = [
        "num_blocks",
        "hidden_dim",
        "num_heads",
        "ffn_dim",
        "vocab_size",
        "max_seq_len",
        "num_classes",
    ];

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_blocks < 1 {
            return fail("num_blocks must be at least 1");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail("hidden_dim must be divisible by num_heads");
        }
        if self.hidden_dim == 0 || self.ffn_dim == 0 {
            return fail("hidden_dim and ffn_dim must be positive");
        }
        if self.vocab_size <= CLS_ID || self.max_seq_len < 1 {
            return fail("vocab_size must cover the reserved ids and max_seq_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn write_kv(&self, kv: &mut KvMap) {
        kv.set("num_blocks", self.num_blocks);
        kv.set("hidden_dim", self.hidden_dim);
        kv.set("num_heads", self.num_heads);
        kv.set("ffn_dim", self.ffn_dim);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_seq_len", self.max_seq_len);
        kv.set("num_classes", self.num_classes);
    }

    /// Starts from `self` and overrides whatever keys `kv` carries.
    pub fn merged(&self, kv: &KvMap) -> Result<Self> {
        let mut c = self.clone();
        kv.update("num_blocks", &mut c.num_blocks)?;
        kv.update("hidden_dim", &mut c.hidden_dim)?;
        kv.update("num_heads", &mut c.num_heads)?;
        kv.update("ffn_dim", &mut c.ffn_dim)?;
        kv.update("vocab_size", &mut c.vocab_size)?;
        kv.update("max_seq_len", &mut c.max_seq_len)?;
        kv.update("num_classes", &mut c.num_classes)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Parameters of one block's output head (`y`) and halting head (`h`).
#[derive(Clone, Copy, Debug)]
pub struct HeadParams {
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub halt_w: ParamId,
    pub halt_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    token_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockParams>,
    heads: Vec<HeadParams>,
}

/// Shapes of every parameter, in initialization order.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (c.hidden_dim, c.ffn_dim);
    let mut specs = vec![
        ("embed.token".into(), vec![c.vocab_size, d], Init::Normal),
        ("embed.pos".into(), vec![c.max_seq_len, d], Init::Normal),
    ];
    for b in 0..c.num_blocks {
        let p = |s: &str| format!("block.{b}.{s}");
        specs.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Uniform(d)),
            (p("attn.bq"), vec![d], Init::Uniform(d)),
            (p("attn.wk"), vec![d, d], Init::Uniform(d)),
            (p("attn.bk"), vec![d], Init::Uniform(d)),
            (p("attn.wv"), vec![d, d], Init::Uniform(d)),
            (p("attn.bv"), vec![d], Init::Uniform(d)),
            (p("attn.wo"), vec![d, d], Init::Uniform(d)),
            (p("attn.bo"), vec![d], Init::Uniform(d)),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, f], Init::Uniform(d)),
            (p("ffn.b1"), vec![f], Init::Uniform(d)),
            (p("ffn.w2"), vec![f, d], Init::Uniform(f)),
            (p("ffn.b2"), vec![d], Init::Uniform(f)),
        ]);
    }
    for b in 0..c.num_blocks {
        specs.extend(head_specs(c, b));
    }
    specs
}

fn head_specs(c: &ModelConfig, b: usize) -> Vec<(String, Vec<usize>, Init)> {
    let (d, k) = (c.hidden_dim, c.num_classes);
    vec![
        (format!("head.{b}.out.w"), vec![d, k], Init::Uniform(d)),
        (format!("head.{b}.out.b"), vec![k], Init::Uniform(d)),
        (format!("head.{b}.halt.w"), vec![d, 1], Init::Uniform(d)),
        (format!("head.{b}.halt.b"), vec![1], Init::Uniform(d)),
    ]
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Ones,
    Zeros,
    Normal,
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform(usize),
}

fn draw(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Ones => vec![1.0; n],
        Init::Zeros => vec![0.0; n],
        Init::Normal => {
            let dist = Normal::new(0.0, EMBED_STD).expect("valid std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Uniform(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Transformer classifier with per-block readout heads.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    blocks_run: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            blocks_run: AtomicU64::new(self.blocks_executed()),
        }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Fresh model; every draw comes from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in param_specs(&config) {
            params.insert(name, draw(init, &shape, &mut rng))?;
        }
        Self::from_params(config, params)
    }

    /// Wraps an existing parameter set, checking that every expected name is
    /// present with the expected shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &specs {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if &params.get(id).shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape
                )));
            }
        }
        let id = |s: String| params.id(&s).expect("checked above");
        let blocks = (0..config.num_blocks)
            .map(|b| {
                let p = |s: &str| id(format!("block.{b}.{s}"));
                BlockParams {
                    ln1_g: p("ln1.gain"),
                    ln1_b: p("ln1.bias"),
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    ln2_g: p("ln2.gain"),
                    ln2_b: p("ln2.bias"),
                    w1: p("ffn.w1"),
                    b1: p("ffn.b1"),
                    w2: p("ffn.w2"),
                    b2: p("ffn.b2"),
                }
            })
            .collect();
        let heads = (0..config.num_blocks)
            .map(|b| HeadParams {
                out_w: id(format!("head.{b}.out.w")),
                out_b: id(format!("head.{b}.out.b")),
                halt_w: id(format!("head.{b}.halt.w")),
                halt_b: id(format!("head.{b}.halt.b")),
            })
            .collect();
        let layout = Layout {
            token_emb: id("embed.token".into()),
            pos_emb: id("embed.pos".into()),
            blocks,
            heads,
        };
        Ok(Model {
            config,
            params,
            layout,
            blocks_run: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_blocks(&self) -> usize {
        self.config.num_blocks
    }

    pub fn head(&self, block: usize) -> HeadParams {
        self.layout.heads[block]
    }

    /// Every parameter belonging to a readout head (output or halting).
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .heads
            .iter()
            .flat_map(|h| [h.out_w, h.out_b, h.halt_w, h.halt_b])
            .collect()
    }

    /// Re-draws the selected head parameters from a ChaCha8 stream seeded
    /// with `seed`. Heads are visited in block order, output before halting.
    pub fn reinit_heads(&mut self, seed: u64, mut select: impl FnMut(usize, HeadPart) -> bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in 0..self.config.num_blocks {
            let specs = head_specs(&self.config, b);
            let ids = self.layout.heads[b];
            let parts = [
                (HeadPart::Output, ids.out_w, &specs[0]),
                (HeadPart::Output, ids.out_b, &specs[1]),
                (HeadPart::Halting, ids.halt_w, &specs[2]),
                (HeadPart::Halting, ids.halt_b, &specs[3]),
            ];
            for (part, id, (_, shape, init)) in parts {
                let fresh = draw(*init, shape, &mut rng);
                if select(b, part) {
                    self.params.get_mut(id).data = fresh.data;
                }
            }
        }
    }

    /// Total blocks executed by this model since construction or the last
    /// [`Model::reset_block_counter`].
    pub fn blocks_executed(&self) -> u64 {
        self.blocks_run.load(Ordering::Relaxed)
    }

    pub fn reset_block_counter(&self) {
        self.blocks_run.store(0, Ordering::Relaxed);
    }

    /// Canonical model input: `[CLS]` at position 0 (prepended if absent),
    /// truncated to `max_seq_len`. Returns the ids and whether truncation
    /// happened.
    pub fn prepare_ids(&self, ids: &[usize]) -> Result<(Vec<usize>, bool)> {
        let mut out = Vec::with_capacity(ids.len() + 1);
        if ids.first() != Some(&CLS_ID) {
            out.push(CLS_ID);
        }
        out.extend_from_slice(ids);
        if let Some(&bad) = out.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                bound: self.config.vocab_size,
            });
        }
        let truncated = out.len() > self.config.max_seq_len;
        out.truncate(self.config.max_seq_len);
        Ok((out, truncated))
    }

    /// Token plus positional embedding of `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Embedded> {
        let (ids, truncated) = self.prepare_ids(ids)?;
        let mut tape = Tape::no_grad();
        let x = self.embed_on(&mut tape, &ids)?;
        Ok(Embedded {
            states: tape.to_tensor(x),
            truncated,
        })
    }

    /// Runs every block and returns all intermediate states.
    pub fn encode(&self, ids: &[usize]) -> Result<BlockStates> {
        self.encode_prefix(ids, self.config.num_blocks)
    }

    /// Runs blocks `1..=upto` only.
    pub fn encode_prefix(&self, ids: &[usize], upto: usize) -> Result<BlockStates> {
        if upto < 1 || upto > self.config.num_blocks {
            return Err(Error::contract(format!(
                "encode_prefix needs 1 <= n <= {}, got {upto}",
                self.config.num_blocks
            )));
        }
        let mut runner = BlockRunner::new(self, Tape::no_grad(), ids)?;
        let mut hidden = runner.tape().value(runner.state()).to_vec();
        let mut cls = Vec::with_capacity(upto * self.config.hidden_dim);
        for _ in 0..upto {
            let c = runner.next_block()?;
            hidden.extend_from_slice(runner.tape().value(runner.state()));
            cls.extend_from_slice(runner.tape().value(c));
        }
        let s = runner.seq_len();
        let d = self.config.hidden_dim;
        Ok(BlockStates {
            hidden: Tensor::new(vec![upto + 1, s, d], hidden)?,
            cls_states: Tensor::new(vec![upto, d], cls)?,
            truncated: runner.truncated,
        })
    }

    pub(crate) fn embed_on(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let tok = tape.param(&self.params, self.layout.token_emb);
        let pos = tape.param(&self.params, self.layout.pos_emb);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let t = tape.embedding(tok, ids)?;
        let p = tape.embedding(pos, &positions)?;
        tape.add(t, p)
    }

    pub(crate) fn block_on(&self, tape: &mut Tape, x: Var, mask: &[bool], b: usize) -> Result<Var> {
        let c = &self.config;
        let bp = &self.layout.blocks[b];
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);

        let (g, bias) = (p(tape, bp.ln1_g), p(tape, bp.ln1_b));
        let h = tape.layer_norm(x, g, bias, LAYER_NORM_EPS)?;
        let q = self.linear(tape, h, bp.wq, bp.bq)?;
        let k = self.linear(tape, h, bp.wk, bp.bk)?;
        let v = self.linear(tape, h, bp.wv, bp.bv)?;
        let hd = c.head_dim();
        let inv_sqrt = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(c.num_heads);
        for head in 0..c.num_heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(k, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt);
            let att = tape.masked_softmax(scores, mask)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = self.linear(tape, cat, bp.wo, bp.bo)?;
        let x = tape.add(x, o)?;

        let (g, bias) = (p(tape, bp.ln2_g), p(tape, bp.ln2_b));
        let h = tape.layer_norm(x, g, bias, LAYER_NORM_EPS)?;
        let f = self.linear(tape, h, bp.w1, bp.b1)?;
        let f = tape.gelu(f);
        let f = self.linear(tape, f, bp.w2, bp.b2)?;
        let out = tape.add(x, f)?;
        self.blocks_run.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    pub(crate) fn linear(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Which half of a readout head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadPart {
    Output,
    Halting,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedded {
    /// `[S, D]`; row 0 is the classification token.
    pub states: Tensor,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockStates {
    /// `[n+1, S, D]`: the embedding followed by each executed block's output.
    pub hidden: Tensor,
    /// `[n, D]`: classification-token row of each executed block's output.
    pub cls_states: Tensor,
    pub truncated: bool,
}

impl BlockStates {
    pub fn num_blocks(&self) -> usize {
        self.cls_states.shape[0]
    }

    pub fn cls(&self, block: usize) -> &[f64] {
        let d = self.cls_states.shape[1];
        &self.cls_states.data[block * d..(block + 1) * d]
    }
}

/// Runs a model one block at a time on a single tape, so callers can stop
/// after any block. Used by every forward path so all of them produce the
/// same values.
pub struct BlockRunner<'m> {
    model: &'m Model,
    tape: Tape,
    mask: Vec<bool>,
    state: Var,
    done: usize,
    pub truncated: bool,
}

impl<'m> BlockRunner<'m> {
    pub fn new(model: &'m Model, mut tape: Tape, ids: &[usize]) -> Result<Self> {
        let (ids, truncated) = model.prepare_ids(ids)?;
        let state = model.embed_on(&mut tape, &ids)?;
        Ok(BlockRunner {
            model,
            tape,
            mask: key_mask(&ids),
            state,
            done: 0,
            truncated,
        })
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Hidden state `[S, D]` after the last executed block.
    pub fn state(&self) -> Var {
        self.state
    }

    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn blocks_done(&self) -> usize {
        self.done
    }

    /// Runs the next block and returns its classification-token row `[1, D]`.
    pub fn next_block(&mut self) -> Result<Var> {
        if self.done >= self.model.num_blocks() {
            return Err(Error::contract("all blocks already executed"));
        }
        self.state = self.model.block_on(&mut self.tape, self.state, &self.mask, self.done)?;
        self.done += 1;
        self.tape.slice_rows(self.state, 0, 1)
    }
}

/// Attention key mask: padding positions are never attended to.
pub fn key_mask(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD_ID).collect()
}
