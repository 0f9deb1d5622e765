mod common;

use eosbench::scenegen::Vocab;
use eosbench::scoring::{
    filter_dataset, read_score_report, removed_indices, score_dataset, score_example, score_from_probs,
    write_score_report, FilterMode, FilterPlan, ScoreMetric, ScoreTriple,
};
use eosbench::tinylm::{forward, log_sum_exp};
use proptest::prelude::*;

const A: usize = 7;
const B: usize = 9;

#[test]
fn three_position_toy() {
    let s = score_from_probs(&[A, B, Vocab::EOS], &[0.5, 0.25, 0.8], Vocab::EOS).unwrap();
    assert!((s.s_neg - (-(0.5f64).ln() - (0.75f64).ln())).abs() < 1e-12);
    assert!((s.s_pos - (-(0.8f64).ln())).abs() < 1e-12);
    assert!((s.s_neg - 0.9808).abs() < 1e-4);
    assert!((s.s_pos - 0.2231).abs() < 1e-4);
    assert!((s.s_final - 0.7577).abs() < 1e-4);
}

#[test]
fn certain_predictions_score_zero() {
    let s = score_from_probs(&[A, Vocab::EOS], &[0.0, 1.0], Vocab::EOS).unwrap();
    assert!(s.s_pos.abs() < 1e-9 && s.s_neg.abs() < 1e-9);
    let s = score_from_probs(&[A, Vocab::EOS], &[1.0, 0.0], Vocab::EOS).unwrap();
    assert!(s.s_pos.is_finite() && s.s_neg.is_finite());
}

#[test]
fn misaligned_probs_rejected() {
    assert!(score_from_probs(&[A, B], &[0.1], Vocab::EOS).is_err());
}

#[test]
fn model_scores_match_full_softmax_oracle() {
    let (ds, params) = common::tiny_testbed(6, 1, 3);
    for ex in &ds.train {
        let s = score_example(&params, ex).unwrap();
        let trace = forward(&params, &ex.features.tokens, ex.inputs()).unwrap();
        let (mut pos, mut neg) = (0.0, 0.0);
        for (i, &y) in ex.labels.iter().enumerate() {
            let row: Vec<f64> = trace.logits.row(i).to_vec();
            let lse = log_sum_exp(row.iter().copied());
            let p: f64 = row[Vocab::EOS].exp() / lse.exp();
            if y == Vocab::EOS {
                pos -= p.ln();
            } else {
                neg -= (1.0 - p).ln();
            }
        }
        assert!((s.s_pos - pos).abs() < 1e-9 * (1.0 + pos.abs()));
        assert!((s.s_neg - neg).abs() < 1e-9 * (1.0 + neg.abs()));
        assert_eq!(s.s_final, s.s_neg - s.s_pos);
    }
}

#[test]
fn dataset_scoring_commutes_with_permutation() {
    let (ds, params) = common::tiny_testbed(8, 1, 4);
    let scores = score_dataset(&params, &ds.train).unwrap();
    let mut rev = ds.train.clone();
    rev.reverse();
    let mut rs = score_dataset(&params, &rev).unwrap();
    rs.reverse();
    assert_eq!(scores, rs);
    assert!(score_dataset(&params, &[]).unwrap().is_empty());
}

#[test]
fn score_report_roundtrips() {
    let scores = vec![
        ScoreTriple { s_pos: 0.1, s_neg: 2.0 / 3.0, s_final: 2.0 / 3.0 - 0.1 },
        ScoreTriple { s_pos: 1e-13, s_neg: 0.0, s_final: -1e-13 },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.tsv");
    write_score_report(&path, &scores).unwrap();
    assert_eq!(read_score_report(&path).unwrap(), scores);
}

#[test]
fn twenty_percent_of_hundred_leaves_eighty() {
    let (ds, params) = common::tiny_testbed(100, 1, 5);
    let scores = score_dataset(&params, &ds.train).unwrap();
    for mode in [FilterMode::Top, FilterMode::Random, FilterMode::Reversed] {
        let plan = FilterPlan { mode, ratio: 0.2, ..Default::default() };
        let (kept, manifest) = filter_dataset(&ds.train, &scores, &plan).unwrap();
        assert_eq!(kept.len(), 80);
        assert_eq!(manifest.removed.len(), 20);
        assert_eq!(manifest.n_after, 80);
    }
}

#[test]
fn ratio_out_of_range_rejected() {
    let scores = vec![triple(0.0); 4];
    for ratio in [0.0, 1.0, -0.1, f64::NAN] {
        let plan = FilterPlan { ratio, ..Default::default() };
        assert!(removed_indices(&scores, &plan).is_err());
    }
}

#[test]
fn ties_break_toward_lower_index() {
    let scores = vec![triple(1.0), triple(2.0), triple(2.0), triple(2.0), triple(0.0)];
    let top = FilterPlan { ratio: 0.4, ..Default::default() };
    assert_eq!(removed_indices(&scores, &top).unwrap(), vec![1, 2]);
    let scores = vec![triple(5.0), triple(0.0), triple(0.0), triple(0.0)];
    let rev = FilterPlan { mode: FilterMode::Reversed, ratio: 0.5, ..Default::default() };
    assert_eq!(removed_indices(&scores, &rev).unwrap(), vec![1, 2]);
}

fn triple(f: f64) -> ScoreTriple {
    ScoreTriple { s_pos: 0.0, s_neg: f, s_final: f }
}

fn triples() -> impl Strategy<Value = Vec<ScoreTriple>> {
    prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..120)
        .prop_map(|v| v.into_iter().map(|(p, n)| ScoreTriple { s_pos: p, s_neg: n, s_final: n - p }).collect())
}

fn modes() -> impl Strategy<Value = FilterMode> {
    prop_oneof![Just(FilterMode::Top), Just(FilterMode::Random), Just(FilterMode::Reversed)]
}

fn metrics() -> impl Strategy<Value = ScoreMetric> {
    prop_oneof![Just(ScoreMetric::Final), Just(ScoreMetric::Neg), Just(ScoreMetric::Pos)]
}

proptest! {
    #[test]
    fn final_is_neg_minus_pos(
        labels in prop::collection::vec(prop_oneof![Just(Vocab::EOS), Just(A), Just(B)], 1..30),
        probs in prop::collection::vec(0.0f64..=1.0, 30),
    ) {
        let s = score_from_probs(&labels, &probs[..labels.len()], Vocab::EOS).unwrap();
        prop_assert_eq!(s.s_final, s.s_neg - s.s_pos);
        prop_assert!(s.s_pos >= 0.0 && s.s_neg >= 0.0);
    }

    #[test]
    fn pos_ignores_non_eos_positions(
        labels in prop::collection::vec(prop_oneof![Just(Vocab::EOS), Just(A)], 1..30),
        probs in prop::collection::vec(0.0f64..=1.0, 30),
        other in prop::collection::vec(0.0f64..=1.0, 30),
    ) {
        let n = labels.len();
        let a = score_from_probs(&labels, &probs[..n], Vocab::EOS).unwrap();
        let mixed: Vec<f64> = (0..n).map(|i| if labels[i] == Vocab::EOS { probs[i] } else { other[i] }).collect();
        let b = score_from_probs(&labels, &mixed, Vocab::EOS).unwrap();
        prop_assert_eq!(a.s_pos, b.s_pos);
        let mixed: Vec<f64> = (0..n).map(|i| if labels[i] == Vocab::EOS { other[i] } else { probs[i] }).collect();
        let c = score_from_probs(&labels, &mixed, Vocab::EOS).unwrap();
        prop_assert_eq!(a.s_neg, c.s_neg);
    }

    #[test]
    fn removal_count_is_ceiling(scores in triples(), mode in modes(), ratio in 0.01f64..0.99, seed in 0u64..100) {
        let plan = FilterPlan { mode, ratio, seed, ..Default::default() };
        let removed = removed_indices(&scores, &plan).unwrap();
        let want = ((ratio * scores.len() as f64).ceil() as usize).min(scores.len());
        prop_assert_eq!(removed.len(), want);
        prop_assert!(removed.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(removed.iter().all(|&i| i < scores.len()));
    }

    #[test]
    fn larger_ratio_removes_superset(scores in triples(), mode in modes(), metric in metrics(), r1 in 0.01f64..0.98, dr in 0.0f64..0.5, seed in 0u64..100) {
        let r2 = (r1 + dr).min(0.99);
        let small = removed_indices(&scores, &FilterPlan { mode, ratio: r1, seed, metric }).unwrap();
        let large = removed_indices(&scores, &FilterPlan { mode, ratio: r2, seed, metric }).unwrap();
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn top_removes_highest_keys(scores in triples(), metric in metrics(), ratio in 0.01f64..0.99) {
        let removed = removed_indices(&scores, &FilterPlan { mode: FilterMode::Top, ratio, metric, ..Default::default() }).unwrap();
        let min_removed = removed.iter().map(|&i| metric.key(&scores[i])).fold(f64::INFINITY, f64::min);
        for i in (0..scores.len()).filter(|i| !removed.contains(i)) {
            prop_assert!(metric.key(&scores[i]) <= min_removed);
        }
    }

    #[test]
    fn top_and_reversed_disjoint(finals in prop::collection::hash_set(-1_000_000i64..1_000_000, 2..100), ratio in 0.01f64..=0.5) {
        let scores: Vec<ScoreTriple> = finals.into_iter().map(|f| triple(f as f64)).collect();
        let top = removed_indices(&scores, &FilterPlan { mode: FilterMode::Top, ratio, ..Default::default() }).unwrap();
        let rev = removed_indices(&scores, &FilterPlan { mode: FilterMode::Reversed, ratio, ..Default::default() }).unwrap();
        if top.len() + rev.len() <= scores.len() {
            prop_assert!(top.iter().all(|i| !rev.contains(i)));
        }
    }

    #[test]
    fn random_filter_is_seed_deterministic(scores in triples(), ratio in 0.01f64..0.99, seed in 0u64..1000) {
        let plan = FilterPlan { mode: FilterMode::Random, ratio, seed, ..Default::default() };
        prop_assert_eq!(removed_indices(&scores, &plan).unwrap(), removed_indices(&scores, &plan).unwrap());
    }
}
