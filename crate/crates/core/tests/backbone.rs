use dact::data::{CLS_ID, PAD_ID};
use dact::{Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INPUTS: u64 = 20;

fn model() -> Model {
    let cfg = ModelConfig {
        vocab_size: 40,
        ..ModelConfig::default()
    };
    Model::new(cfg, 11).unwrap()
}

fn random_ids(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(1..20);
    (0..len).map(|_| rng.gen_range(4..40)).collect()
}

#[test]
fn padding_never_changes_classification_states() {
    let m = model();
    for i in 0..INPUTS {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let ids = random_ids(&mut rng);
        let mut padded = ids.clone();
        padded.resize(ids.len() + rng.gen_range(1..8), PAD_ID);
        let a = m.encode(&ids).unwrap();
        let b = m.encode(&padded).unwrap();
        for n in 0..m.num_blocks() {
            for (x, y) in a.cls(n).iter().zip(b.cls(n)) {
                assert!((x - y).abs() < 1e-12, "input {i} block {n}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn prefix_runs_are_bitwise_prefixes() {
    let m = model();
    for i in 0..INPUTS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
        let ids = random_ids(&mut rng);
        let full = m.encode(&ids).unwrap();
        let upto = rng.gen_range(1..=m.num_blocks());
        let part = m.encode_prefix(&ids, upto).unwrap();
        assert_eq!(part.num_blocks(), upto);
        for n in 0..upto {
            assert_eq!(part.cls(n), full.cls(n), "input {i} block {n}");
        }
    }
}

#[test]
fn leading_cls_is_not_duplicated() {
    let m = model();
    let ids = vec![7, 9, 12];
    let mut with_cls = vec![CLS_ID];
    with_cls.extend(&ids);
    assert_eq!(m.encode(&ids).unwrap(), m.encode(&with_cls).unwrap());
}

#[test]
fn block_counter_tracks_executed_blocks() {
    let m = model();
    m.reset_block_counter();
    m.encode_prefix(&[5, 6], 2).unwrap();
    m.encode(&[5, 6]).unwrap();
    assert_eq!(m.blocks_executed(), 2 + m.num_blocks() as u64);
}

#[test]
fn out_of_vocabulary_id_is_rejected() {
    let m = model();
    assert!(m.encode(&[5, 40]).is_err());
}
