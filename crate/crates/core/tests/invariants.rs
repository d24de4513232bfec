use dact::baselines::{forward_baseline, BaselineConfig};
use dact::dact::{
    adversarial_bound_audit, block_readout, dact_step, forward_training, halting_bound_holds, BlockReadout,
    HaltingState,
};
use dact::data::{encode_all, Difficulty, Example, Vocab};
use dact::harness::{layer_histogram, Method};
use dact::par::Execution;
use dact::tensor::{sigmoid_scalar, softmax_slice, Tape, Tensor};
use dact::{Model, ModelConfig};
use proptest::prelude::*;

fn small_config() -> ModelConfig {
    ModelConfig {
        num_blocks: 4,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 20,
        max_seq_len: 16,
        num_classes: 3,
    }
}

fn ids_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(4usize..20, 1..14)
}

fn readout_strategy(c: usize) -> impl Strategy<Value = BlockReadout> {
    (prop::collection::vec(-30.0f64..30.0, c), 1e-6f64..(1.0 - 1e-6)).prop_map(|(logits, h)| {
        let mut y = vec![0.0; logits.len()];
        softmax_slice(&logits, None, &mut y);
        BlockReadout { y, h }
    })
}

fn is_probability_vector(v: &[f64]) -> bool {
    v.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_shape_matches_data(shape in prop::collection::vec(1usize..4, 1..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn softmax_is_finite_probability_vector(
        x in prop::collection::vec(-700.0f64..700.0, 1..10),
    ) {
        let mut out = vec![0.0; x.len()];
        softmax_slice(&x, None, &mut out);
        prop_assert!(out.iter().all(|v| v.is_finite()));
        prop_assert!(is_probability_vector(&out));
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in -30.0f64..30.0) {
        let s = sigmoid_scalar(x);
        prop_assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn fan_out_adjoints_add(x in -5.0f64..5.0) {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::scalar(x).with_grad());
        let sq = tape.mul(v, v).unwrap();
        let y = tape.add(sq, v).unwrap();
        let g = tape.backward(y).unwrap();
        prop_assert!((g.wrt(v).unwrap()[0] - (2.0 * x + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn halting_state_stays_a_distribution(
        readouts in prop::collection::vec(readout_strategy(3), 1..12),
    ) {
        let mut st = HaltingState::initial(3);
        prop_assert_eq!(st.p, 1.0);
        prop_assert!(st.a.iter().all(|&v| v == 0.0));
        for r in &readouts {
            let next = dact_step(&st, r);
            prop_assert!(is_probability_vector(&next.a));
            prop_assert!(next.p >= 0.0 && next.p <= st.p);
            prop_assert_eq!(next.n, st.n + 1);
            st = next;
        }
    }

    #[test]
    fn bound_implies_adversarial_audit(
        readouts in prop::collection::vec(readout_strategy(3), 1..6),
        d in 1usize..8,
    ) {
        let mut st = HaltingState::initial(3);
        for r in &readouts {
            st = dact_step(&st, r);
        }
        if halting_bound_holds(&st, d).unwrap() {
            prop_assert!(adversarial_bound_audit(&st, d));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn readouts_and_loss_breakdown(seed in 0u64..1000, ids in ids_strategy(), label in 0usize..3, tau in 0.0f64..1.0) {
        let model = Model::new(small_config(), seed).unwrap();
        let states = model.encode(&ids).unwrap();
        for b in 0..model.num_blocks() {
            let r = block_readout(&model, states.cls(b), b).unwrap();
            prop_assert!((r.y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.h > 0.0 && r.h < 1.0);
            // The classification row of block b's output.
            let d = model.config().hidden_dim;
            let s = states.hidden.shape[1];
            let off = (b + 1) * s * d;
            prop_assert_eq!(states.cls(b), &states.hidden.data[off..off + d]);
        }
        let fwd = forward_training(&model, &ids, label, tau).unwrap();
        let l = fwd.loss;
        prop_assert!((l.total - (l.task_loss + tau * l.ponder_penalty)).abs() < 1e-12);
        let sum_h: f64 = fwd.readouts.iter().map(|r| r.h).sum();
        prop_assert!((l.ponder_penalty - sum_h).abs() < 1e-12);
    }

    #[test]
    fn baseline_knobs_are_monotone(seed in 0u64..1000, ids in ids_strategy(), t in 0.0f64..1.2, dt in 0.0f64..0.5, pat in 1usize..4) {
        let model = Model::new(small_config(), seed).unwrap();
        let layers = |cfg| forward_baseline(&model, &ids, cfg).unwrap().layers_used;
        let loose = layers(BaselineConfig::Entropy { threshold: t + dt });
        let strict = layers(BaselineConfig::Entropy { threshold: t });
        prop_assert!(loose <= strict);
        let patient = layers(BaselineConfig::Patience { patience: pat + 1 });
        let eager = layers(BaselineConfig::Patience { patience: pat });
        prop_assert!(patient >= eager);
    }

    #[test]
    fn histograms_never_increase(seed in 0u64..1000, batch in prop::collection::vec(ids_strategy(), 1..12)) {
        let model = Model::new(small_config(), seed).unwrap();
        let examples: Vec<_> = batch
            .into_iter()
            .map(|ids| dact::data::Encoded { ids, label: 0, difficulty: Some(Difficulty::Easy) })
            .collect();
        for method in [Method::Dact, Method::Entropy(0.9), Method::Patience(1), Method::Static] {
            let h = layer_histogram(&model, &examples, method, Execution::Sequential).unwrap();
            prop_assert!(h.is_non_increasing());
            prop_assert_eq!(h.counts[0], examples.len());
        }
    }

    #[test]
    fn vocab_is_stable_under_reordering(
        texts in prop::collection::vec(prop::collection::vec("[a-e]{1,2}", 1..6), 1..10),
        rot in 0usize..10,
    ) {
        let examples: Vec<Example> = texts
            .iter()
            .map(|t| Example { text_a: t.join(" "), text_b: None, label: 0, difficulty: None })
            .collect();
        let mut rotated = examples.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let a = Vocab::build(&examples);
        let b = Vocab::build(&rotated);
        prop_assert_eq!(a.len(), b.len());
        for id in 0..a.len() {
            prop_assert_eq!(a.token(id), b.token(id));
        }
        let enc = encode_all(&examples, &a, 32);
        prop_assert!(enc.iter().all(|e| e.ids.iter().all(|&i| i < a.len())));
    }
}
