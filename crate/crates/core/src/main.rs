use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dact::checkpoint;
use dact::config::KvMap;
use dact::dact::audit_random_states;
use dact::data::{gen_synthetic, load_tsv, save_tsv, split, Difficulty, Example, SyntheticSpec, TsvSchema, Vocab};
use dact::harness::{self, Method, MethodKind};
use dact::par::Execution;
use dact::pipeline::{run_sweep, Prepared};
use dact::train::{train_baseline_heads, train_phase1, train_phase2, TrainConfig, REFERENCE_TAU_GRID};
use dact::{Error, Model, ModelConfig, Result};

#[derive(Parser)]
#[command(
    name = "dact",
    version,
    about = "Adaptive-depth transformer classifiers and early-exit baselines"
)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixed-difficulty dataset as TSV.
    GenData(GenData),
    /// Train one model (phase 1, then phase 2 or baseline heads).
    Train(Train),
    /// Sweep tau over a grid and seeds, with baselines; writes tradeoff.csv.
    Sweep(Sweep),
    /// Evaluate a checkpoint with one inference method.
    Eval(Eval),
    /// Aggregate a tradeoff CSV into per-method curves and AUC.
    Curve(Curve),
    /// Per-block usage counts of a checkpoint on a dataset.
    Histogram(Histogram),
    /// Adversarially audit the halting bound on random states.
    Audit(Audit),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of examples.
    #[arg(long, default_value_t = 1200)]
    n: usize,
    #[arg(long, default_value = "marker-depth")]
    family: String,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Common {
    /// TSV dataset with columns text_a, text_b, label[, difficulty].
    #[arg(long)]
    data: PathBuf,
    /// key=value file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainKind {
    Dact,
    Baseline,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// dact: phase 2 on the DACT loss; baseline: per-block heads on a frozen backbone.
    #[arg(long, value_enum, default_value = "dact")]
    method: TrainKind,
    /// Checkpoint path; the vocabulary is written next to it as <out>.vocab.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    /// `paper` or a comma-separated list of tau values.
    #[arg(long, default_value = "paper")]
    grid: String,
    /// Comma-separated seeds; each one re-draws heads and reshuffles phase 2.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Seed of the shared phase-1 run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_baselines: bool,
    /// Output directory.
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct Target {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file; defaults to <checkpoint>.vocab.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "dact")]
    method: MethodArg,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Dact,
    Entropy,
    Patience,
    Static,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    target: Target,
    /// Seed recorded in the CSV row; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "tradeoff.csv")]
    out: PathBuf,
    /// Per-block DACT trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct Curve {
    /// tradeoff.csv produced by `sweep` or `eval`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "curve.csv")]
    out: PathBuf,
    #[arg(long, default_value = "auc.csv")]
    auc: PathBuf,
}

#[derive(Args)]
struct Histogram {
    #[command(flatten)]
    target: Target,
    #[arg(long, default_value = "histogram.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct Audit {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Largest number of remaining blocks to simulate.
    #[arg(long, default_value_t = 6)]
    max_remaining: usize,
    /// Also compare early-exit and full-depth predictions of this checkpoint.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, exec),
        Command::Sweep(a) => sweep(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Curve(a) => curve(a),
        Command::Histogram(a) => histogram(a, exec),
        Command::Audit(a) => audit(a, exec),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}

fn labels(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|k| k.to_string()).collect()
}

fn gen_data(a: GenData) -> Result<ExitCode> {
    let spec = SyntheticSpec {
        family: a.family,
        num_classes: a.classes,
        ..SyntheticSpec::default()
    };
    let examples = gen_synthetic(a.seed, a.n, &spec)?;
    save_tsv(&a.out, &examples, &labels(a.classes))?;
    let easy = examples
        .iter()
        .filter(|e| e.difficulty == Some(Difficulty::Easy))
        .count();
    println!(
        "wrote {} examples ({easy} easy, {} hard) to {}",
        examples.len(),
        examples.len() - easy,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    let kv = match path {
        Some(p) => KvMap::load(p)?,
        None => KvMap::new(),
    };
    let known: Vec<&str> = ModelConfig::KEYS
        .iter()
        .chain(TrainConfig::KEYS.iter())
        .copied()
        .collect();
    let unknown = kv.unknown_keys(&known);
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    Ok((ModelConfig::default().merged(&kv)?, TrainConfig::default().merged(&kv)?))
}

fn prepare(common: &Common, exec: Execution) -> Result<(Prepared, TrainConfig)> {
    let (model, mut cfg) = load_configs(common.config.as_deref())?;
    cfg.exec = exec;
    let examples = load_tsv(&common.data, &TsvSchema::standard(model.num_classes))?;
    if examples.is_empty() {
        return Err(Error::Config(format!("{} holds no examples", common.data.display())));
    }
    Ok((Prepared::new(&examples, &model)?, cfg))
}

fn meta_for(kind: &str, cfg: &TrainConfig) -> KvMap {
    let mut meta = KvMap::new();
    meta.set("kind", kind);
    cfg.write_kv(&mut meta);
    meta
}

fn save_model(path: &Path, model: &Model, meta: &KvMap, vocab: &Vocab) -> Result<()> {
    checkpoint::save(path, model, meta)?;
    vocab.save(&vocab_path(path))
}

fn train(a: Train, exec: Execution) -> Result<ExitCode> {
    let (data, mut cfg) = prepare(&a.common, exec)?;
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut model = Model::new(data.model.clone(), cfg.seed)?;
    let p1 = train_phase1(&mut model, &data.train, &cfg)?;
    let (kind, p2) = match a.method {
        TrainKind::Dact => ("dact", train_phase2(&mut model, &data.train, &cfg)?),
        TrainKind::Baseline => ("baseline", train_baseline_heads(&mut model, &data.train, &cfg)?),
    };
    save_model(&a.out, &model, &meta_for(kind, &cfg), &data.vocab)?;
    println!("train examples      {}", data.train.len());
    println!("validation examples {}", data.val.len());
    if let Some(l) = p1.epoch_losses.last() {
        println!("phase 1 final loss  {}", harness::fmt9(*l));
    }
    if let Some(l) = p2.epoch_losses.last() {
        println!("{kind} final loss    {}", harness::fmt9(*l));
    }
    if !data.val.is_empty() {
        let method = if kind == "dact" { Method::Dact } else { Method::Static };
        let r = harness::evaluate(&model, &data.val, method, exec)?;
        println!(
            "validation          {} accuracy {} efficiency {}",
            method.kind(),
            harness::fmt9(r.point.performance),
            harness::fmt9(r.point.efficiency)
        );
    }
    println!("checkpoint          {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} value `{x}`")))
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if s == "paper" {
        Ok(REFERENCE_TAU_GRID.to_vec())
    } else {
        parse_list(s, "tau")
    }
}

fn sweep(a: Sweep, exec: Execution) -> Result<ExitCode> {
    let (data, mut cfg) = prepare(&a.common, exec)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let grid = parse_grid(&a.grid)?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let result = run_sweep(&data, &cfg, &grid, &seeds, !a.no_baselines)?;

    save_model(
        &a.out.join("phase1.ckpt"),
        &result.phase1,
        &meta_for("phase1", &cfg),
        &data.vocab,
    )?;
    let mut failed = 0;
    for cell in &result.cells {
        match &cell.outcome {
            Ok((model, point)) => {
                let cell_cfg = TrainConfig {
                    tau: cell.tau,
                    seed: cell.seed,
                    ..cfg.clone()
                };
                let name = format!("dact_tau{:e}_seed{}.ckpt", cell.tau, cell.seed);
                save_model(&a.out.join(name), model, &meta_for("dact", &cell_cfg), &data.vocab)?;
                println!(
                    "tau {:<8e} seed {:<3} efficiency {} accuracy {}",
                    cell.tau,
                    cell.seed,
                    harness::fmt9(point.efficiency),
                    harness::fmt9(point.performance)
                );
            }
            Err(e) => {
                failed += 1;
                eprintln!("tau {:e} seed {}: {e}", cell.tau, cell.seed);
            }
        }
    }
    for (seed, model) in &result.baselines {
        let cell_cfg = TrainConfig {
            seed: *seed,
            ..cfg.clone()
        };
        let name = format!("baseline_seed{seed}.ckpt");
        save_model(&a.out.join(name), model, &meta_for("baseline", &cell_cfg), &data.vocab)?;
    }

    harness::write_tradeoff_csv(create(&a.out.join("tradeoff.csv"))?, &result.points)?;
    let curves = harness::curve(&result.points);
    harness::write_curve_csv(create(&a.out.join("curve.csv"))?, &curves)?;
    harness::write_auc_csv(create(&a.out.join("auc.csv"))?, &curves)?;
    print_auc(&curves);
    println!("wrote {}", a.out.display());
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn print_auc(curves: &[harness::MethodCurve]) {
    for c in curves {
        let auc = c.auc.map_or_else(|| "undefined".to_string(), harness::fmt9);
        println!(
            "{:<9} auc {auc} over efficiency [{}, {}]",
            c.method.to_string(),
            harness::fmt9(c.efficiency_range.0),
            harness::fmt9(c.efficiency_range.1)
        );
    }
}

struct Loaded {
    model: Model,
    meta: KvMap,
    examples: Vec<Example>,
    vocab: Vocab,
}

fn load_target(t: &Target) -> Result<Loaded> {
    let (model, meta) = checkpoint::load(&t.checkpoint)?;
    let vocab = Vocab::load(&t.vocab.clone().unwrap_or_else(|| vocab_path(&t.checkpoint)))?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let all = load_tsv(&t.data, &TsvSchema::standard(model.config().num_classes))?;
    let examples = match t.split {
        SplitArg::All => all,
        SplitArg::Train => split(&all).0,
        SplitArg::Val => split(&all).1,
    };
    Ok(Loaded {
        model,
        meta,
        examples,
        vocab,
    })
}

fn method_of(t: &Target) -> Result<Method> {
    Ok(match t.method {
        MethodArg::Dact => Method::Dact,
        MethodArg::Static => Method::Static,
        MethodArg::Entropy => Method::Entropy(
            t.threshold
                .ok_or_else(|| Error::Config("--method entropy needs --threshold".into()))?,
        ),
        MethodArg::Patience => Method::Patience(
            t.patience
                .ok_or_else(|| Error::Config("--method patience needs --patience".into()))?,
        ),
    })
}

fn evaluate_target(t: &Target, exec: Execution) -> Result<(Loaded, harness::EvalReport)> {
    let method = method_of(t)?;
    let loaded = load_target(t)?;
    let encoded = dact::data::encode_all(&loaded.examples, &loaded.vocab, loaded.model.config().max_seq_len);
    let report = harness::evaluate(&loaded.model, &encoded, method, exec)?;
    Ok((loaded, report))
}

fn eval(a: Eval, exec: Execution) -> Result<ExitCode> {
    let (loaded, mut report) = evaluate_target(&a.target, exec)?;
    report.point.seed = match a.seed {
        Some(s) => s,
        None => loaded.meta.get("seed")?.unwrap_or(0),
    };
    if report.point.method == MethodKind::Dact {
        report.point.knob = loaded.meta.get("tau")?.unwrap_or(0.0);
    }
    harness::write_tradeoff_csv(create(&a.out)?, std::slice::from_ref(&report.point))?;
    if let Some(path) = &a.trace {
        if report.point.method != MethodKind::Dact {
            return Err(Error::Config("--trace is only available for --method dact".into()));
        }
        harness::write_trace_csv(create(path)?, &report.results, loaded.model.config().num_classes)?;
    }
    println!("method      {}", report.point.method);
    println!("examples    {}", report.results.len());
    println!("accuracy    {}", harness::fmt9(report.point.performance));
    println!("efficiency  {}", harness::fmt9(report.point.efficiency));
    for tag in [Difficulty::Easy, Difficulty::Hard] {
        if let Some(m) = report.mean_layers(tag) {
            println!("layers {tag:<4} {}", harness::fmt9(m));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn curve(a: Curve) -> Result<ExitCode> {
    let file = File::open(&a.input).map_err(|e| Error::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let points = harness::read_tradeoff_csv(file)?;
    let curves = harness::curve(&points);
    harness::write_curve_csv(create(&a.out)?, &curves)?;
    harness::write_auc_csv(create(&a.auc)?, &curves)?;
    print_auc(&curves);
    Ok(ExitCode::SUCCESS)
}

fn histogram(a: Histogram, exec: Execution) -> Result<ExitCode> {
    let (_, report) = evaluate_target(&a.target, exec)?;
    harness::write_histogram_csv(create(&a.out)?, &report.histogram)?;
    for (b, c) in report.histogram.counts.iter().enumerate() {
        println!("block {:>2} {c}", b + 1);
    }
    Ok(ExitCode::SUCCESS)
}

fn audit(a: Audit, exec: Execution) -> Result<ExitCode> {
    let summary = audit_random_states(a.seed, a.samples, a.classes, a.max_remaining)?;
    println!(
        "bound audit: {} states checked ({} drawn), {} counterexamples",
        summary.checked,
        summary.drawn,
        summary.failures.len()
    );
    for (state, d) in summary.failures.iter().take(10) {
        println!("  a {:?} p {} d {d}", state.a, state.p);
    }
    let mut ok = summary.failures.is_empty();
    if let (Some(ckpt), Some(data)) = (a.checkpoint, a.data) {
        let target = Target {
            checkpoint: ckpt,
            data,
            vocab: a.vocab,
            split: SplitArg::All,
            method: MethodArg::Dact,
            threshold: None,
            patience: None,
        };
        let loaded = load_target(&target)?;
        let encoded = dact::data::encode_all(&loaded.examples, &loaded.vocab, loaded.model.config().max_seq_len);
        let (same, total) = harness::early_exit_agreement(&loaded.model, &encoded, exec)?;
        println!("early exit agrees with full depth on {same} of {total} examples");
        ok &= same == total;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
