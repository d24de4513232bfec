use std::collections::HashMap;

use dact::data::{gen_synthetic, load_tsv, save_tsv, Difficulty, Example, SyntheticSpec, TsvSchema, Vocab, PAD_ID};
use dact::Error;

fn labels(c: usize) -> Vec<String> {
    (0..c).map(|k| k.to_string()).collect()
}

#[test]
fn tsv_round_trip_through_a_file() {
    let spec = SyntheticSpec::default();
    let mut data = gen_synthetic(9, 120, &spec).unwrap();
    data[0].text_b = Some("b c".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.tsv");
    save_tsv(&path, &data, &labels(2)).unwrap();
    let back = load_tsv(&path, &TsvSchema::standard(2)).unwrap();
    assert_eq!(back, data);
}

#[test]
fn missing_label_reports_line_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tsv");
    std::fs::write(&path, "text_a\tlabel\nno label here\n").unwrap();
    let err = load_tsv(&path, &TsvSchema::standard(2)).unwrap_err();
    assert!(matches!(err, Error::Data { line: 2, .. }), "{err}");
}

#[test]
fn synthetic_examples_fit_without_truncation() {
    let spec = SyntheticSpec::default();
    let data = gen_synthetic(2, 500, &spec).unwrap();
    let vocab = Vocab::build(&data);
    let max_len = dact::ModelConfig::default().max_seq_len;
    for ex in &data {
        let ids = vocab.tokenize(ex, max_len);
        assert_eq!(ids.len(), max_len);
        let used = ids.iter().filter(|&&i| i != PAD_ID).count();
        assert_eq!(used, spec.seq_len + 1, "{}", ex.text_a);
    }
}

fn binomial(n: u64, k: u64) -> f64 {
    (1..=k).map(|i| (n + 1 - i) as f64 / i as f64).product()
}

/// Easy examples are decided by their marker; the best a reader of the cues
/// alone can do on hard examples is a majority vote.
#[test]
fn decision_rules_reach_their_oracle_rates() {
    let spec = SyntheticSpec {
        easy_ratio: 0.5,
        ..SyntheticSpec::default()
    };
    assert_eq!(spec.num_classes, 2);
    assert_eq!(spec.cues % 2, 1);
    let data = gen_synthetic(4, 8000, &spec).unwrap();
    let (mut easy, mut easy_ok, mut hard, mut hard_ok) = (0, 0, 0, 0);
    for ex in &data {
        let toks: Vec<&str> = ex.text_a.split(' ').collect();
        match ex.difficulty.unwrap() {
            Difficulty::Easy => {
                easy += 1;
                let m = toks.iter().find(|t| t.starts_with('m')).unwrap();
                easy_ok += usize::from(m[1..].parse::<usize>().unwrap() == ex.label);
            }
            Difficulty::Hard => {
                hard += 1;
                let mut votes: HashMap<usize, usize> = HashMap::new();
                for t in toks.iter().filter(|t| t.starts_with('c') && t.len() == 2) {
                    *votes.entry(t[1..].parse().unwrap()).or_default() += 1;
                }
                let winner = *votes.iter().max_by_key(|(_, &v)| v).unwrap().0;
                hard_ok += usize::from(winner == ex.label);
            }
        }
    }
    assert_eq!(easy_ok, easy);
    let n = spec.cues as u64;
    let q = spec.cue_fidelity;
    let oracle: f64 = (n / 2 + 1..=n)
        .map(|k| binomial(n, k) * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32))
        .sum();
    let rate = hard_ok as f64 / hard as f64;
    assert!((rate - oracle).abs() < 0.02, "majority vote {rate} vs oracle {oracle}");
}

#[test]
fn hard_examples_have_no_marker() {
    let data = gen_synthetic(6, 300, &SyntheticSpec::default()).unwrap();
    let hard: Vec<&Example> = data.iter().filter(|e| e.difficulty == Some(Difficulty::Hard)).collect();
    assert!(!hard.is_empty());
    assert!(hard.iter().all(|e| !e.text_a.split(' ').any(|t| t.starts_with('m'))));
}
