use dact::data::{gen_synthetic, SyntheticSpec};
use dact::harness::{self, mean_ponder, Method, MethodKind};
use dact::par::Execution;
use dact::pipeline::{run_sweep, Prepared};
use dact::tensor::ParamId;
use dact::train::{sweep_tau, train_baseline_heads, train_phase1, train_phase2, TrainConfig, REFERENCE_TAU_GRID};
use dact::{Model, ModelConfig};

fn small() -> ModelConfig {
    ModelConfig {
        num_blocks: 3,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        ..ModelConfig::default()
    }
}

fn prepared(n: usize, easy_ratio: f64) -> Prepared {
    let spec = SyntheticSpec {
        easy_ratio,
        ..SyntheticSpec::default()
    };
    Prepared::new(&gen_synthetic(21, n, &spec).unwrap(), &small()).unwrap()
}

fn cfg(epochs1: usize, epochs2: usize) -> TrainConfig {
    TrainConfig {
        epochs_phase1: epochs1,
        epochs_phase2: epochs2,
        ..TrainConfig::default()
    }
}

fn phase1(data: &Prepared, epochs: usize) -> Model {
    let mut m = Model::new(data.model.clone(), 0).unwrap();
    train_phase1(&mut m, &data.train, &cfg(epochs, 0)).unwrap();
    m
}

fn same(a: &Model, b: &Model, id: ParamId) -> bool {
    a.params.get(id).data == b.params.get(id).data
}

fn backbone_ids(m: &Model) -> Vec<ParamId> {
    let heads = m.head_param_ids();
    m.params.ids().filter(|id| !heads.contains(id)).collect()
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let data = prepared(80, 0.7);
    let fresh = Model::new(data.model.clone(), 0).unwrap();
    let mut m = fresh.clone();
    let report = train_phase1(&mut m, &data.train, &cfg(0, 0)).unwrap();
    assert!(report.step_losses.is_empty());
    assert_eq!(m, fresh);
}

#[test]
fn phase1_trains_backbone_and_last_output_head_only() {
    let data = prepared(120, 0.7);
    let fresh = Model::new(data.model.clone(), 0).unwrap();
    let mut m = fresh.clone();
    train_phase1(&mut m, &data.train, &cfg(1, 0)).unwrap();
    let last = m.num_blocks() - 1;
    for b in 0..m.num_blocks() {
        let h = m.head(b);
        assert!(
            same(&m, &fresh, h.halt_w) && same(&m, &fresh, h.halt_b),
            "halting head {b}"
        );
        assert_eq!(same(&m, &fresh, h.out_w), b != last, "output head {b}");
    }
    assert!(backbone_ids(&m).iter().all(|&id| !same(&m, &fresh, id)));
}

#[test]
fn phase1_loss_falls_within_the_first_epoch() {
    let data = prepared(240, 0.7);
    let mut m = Model::new(data.model.clone(), 0).unwrap();
    let report = train_phase1(&mut m, &data.train, &cfg(1, 0)).unwrap();
    let s = &report.step_losses;
    let head: f64 = s[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = s[s.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "first steps {head}, last steps {tail}");
}

#[test]
fn phase1_separates_marker_only_data() {
    let data = prepared(400, 1.0);
    let m = phase1(&data, 4);
    let acc = harness::evaluate(&m, &data.val, Method::Static, Execution::Parallel)
        .unwrap()
        .point
        .performance;
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let data = prepared(120, 0.7);
    let run = |exec| {
        let mut m = Model::new(data.model.clone(), 0).unwrap();
        let c = TrainConfig { exec, ..cfg(1, 1) };
        train_phase1(&mut m, &data.train, &c).unwrap();
        train_phase2(&mut m, &data.train, &c).unwrap();
        m
    };
    let a = run(Execution::Parallel);
    assert_eq!(a, run(Execution::Parallel));
    assert_eq!(a, run(Execution::Sequential));
}

#[test]
fn phase2_reaches_every_parameter() {
    let data = prepared(120, 0.7);
    let mut m = phase1(&data, 1);
    let report = train_phase2(&mut m, &data.train, &TrainConfig { tau: 0.05, ..cfg(0, 1) }).unwrap();
    for (id, hit) in m.params.ids().zip(&report.touched) {
        assert!(hit, "{} received no gradient", m.params.name(id));
    }
}

#[test]
fn larger_tau_lowers_ponder() {
    let data = prepared(240, 0.7);
    let base = phase1(&data, 2);
    let ponder = |tau| {
        let mut m = base.clone();
        train_phase2(&mut m, &data.train, &TrainConfig { tau, ..cfg(0, 2) }).unwrap();
        mean_ponder(&m, &data.val, Execution::Parallel).unwrap()
    };
    let (lo, hi) = (ponder(0.0), ponder(0.5));
    assert!(hi < lo, "sum h at tau 0: {lo}, at tau 0.5: {hi}");
}

#[test]
fn baseline_heads_leave_the_backbone_frozen() {
    let data = prepared(120, 0.7);
    let base = phase1(&data, 1);
    let mut m = base.clone();
    train_baseline_heads(&mut m, &data.train, &cfg(0, 1)).unwrap();
    assert!(backbone_ids(&m).iter().all(|&id| same(&m, &base, id)));
    assert!((0..m.num_blocks()).all(|b| !same(&m, &base, m.head(b).out_w)));
}

#[test]
fn single_cell_sweep_matches_direct_phase2() {
    let data = prepared(120, 0.7);
    let base = phase1(&data, 1);
    let c = cfg(0, 1);
    let cells = sweep_tau(&base, &data.train, &data.val, &c, &[0.05], &[3]).unwrap();
    assert_eq!(cells.len(), 1);
    let (swept, point) = cells[0].outcome.as_ref().unwrap();
    let mut direct = base.clone();
    train_phase2(
        &mut direct,
        &data.train,
        &TrainConfig {
            tau: 0.05,
            seed: 3,
            ..c
        },
    )
    .unwrap();
    assert_eq!(swept, &direct);
    assert_eq!((point.knob, point.seed), (0.05, 3));
}

#[test]
fn reference_grid_gives_fifteen_dact_points() {
    let data = prepared(60, 0.7);
    let sweep = run_sweep(&data, &cfg(1, 1), &REFERENCE_TAU_GRID, &[0, 1, 2], true).unwrap();
    assert_eq!(sweep.cells.len(), 15);
    let dact = sweep.points.iter().filter(|p| p.method == MethodKind::Dact).count();
    assert_eq!(dact, 15);
    assert_eq!(sweep.baselines.len(), 3);
    assert!(sweep.points.iter().any(|p| p.method == MethodKind::Entropy));
    assert!(sweep.points.iter().any(|p| p.method == MethodKind::Patience));
}

#[test]
fn empty_grid_is_a_config_error() {
    let data = prepared(60, 0.7);
    let base = phase1(&data, 0);
    assert!(sweep_tau(&base, &data.train, &data.val, &cfg(0, 1), &[], &[0]).is_err());
}
