mod common;

use eosbench::probes::{
    aggregation_pattern, exp_fit, flow_proportions, flow_summary, manipulate, saliency, sample_non_eos_target,
    segment, tendency_report, Manipulation, ManipulationMode,
};
use eosbench::scenegen::{stream_rng, Vocab};
use proptest::prelude::*;

#[test]
fn saliency_matches_finite_differences() {
    let (ds, params) = common::tiny_testbed(3, 1, 11);
    let ex = &ds.train[0];
    let target_pos = ex.caption.len() - 1;
    let rep = saliency(&params, ex, target_pos).unwrap();
    let tokens = &ex.caption[..target_pos];
    let trace = eosbench::tinylm::forward(&params, &ex.features.tokens, tokens).unwrap();
    let n_heads = params.config.n_heads;
    let ctx = rep.layers[0].nrows();
    let mut checked = 0;
    for (l, m) in rep.layers.iter().enumerate() {
        // every entry of the predicting row plus a strided sample of the rest
        let cells = (0..ctx).map(|c| (rep.row, c)).chain((0..ctx * ctx).step_by(7).map(|k| (k / ctx, k % ctx)));
        for (r, c) in cells {
            let want: f64 = (0..n_heads)
                .map(|h| {
                    let g = common::fd_attention(&params, &ex.features.tokens, tokens, rep.target_token, l, h, r, c);
                    (trace.attn[l][h][[r, c]] * g).abs()
                })
                .sum::<f64>()
                / n_heads as f64;
            assert!(
                common::close(m[[r, c]], want, 1e-2, 1e-8),
                "layer {l} ({r},{c}): {} vs {want}",
                m[[r, c]]
            );
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn saliency_is_nonnegative_and_causal() {
    let (ds, params) = common::tiny_testbed(4, 1, 12);
    for ex in &ds.train {
        let rep = saliency(&params, ex, ex.caption.len() - 1).unwrap();
        let s = rep.n_slots;
        for m in &rep.layers {
            assert!(m.iter().all(|&v| v >= 0.0 && v.is_finite()));
            for i in 0..m.nrows() {
                for j in s..m.ncols() {
                    if i < s || j > i {
                        assert_eq!(m[[i, j]], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn bad_target_rejected() {
    let (ds, params) = common::tiny_testbed(1, 1, 13);
    let ex = &ds.train[0];
    assert!(saliency(&params, ex, 0).is_err());
    assert!(saliency(&params, ex, ex.caption.len()).is_err());
}

#[test]
fn proportions_sum_to_one() {
    let (ds, params) = common::tiny_testbed(6, 1, 14);
    for (i, ex) in ds.train.iter().enumerate() {
        let t = sample_non_eos_target(ex, i as u64).unwrap();
        assert!(t >= 1 && t < ex.caption.len() - 1);
        for target in [t, ex.caption.len() - 1] {
            let rep = saliency(&params, ex, target).unwrap();
            for p in flow_proportions(&rep).iter().chain(aggregation_pattern(&rep).iter()) {
                let s: f64 = p.iter().sum();
                assert!((s - 1.0).abs() < 1e-9 || s == 0.0);
                assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
    let summary = flow_summary(&params, &ds.train, 0).unwrap();
    assert_eq!(summary.n_examples, ds.train.len());
    for row in summary.eos.iter().chain(&summary.non_eos) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bos_belongs_to_first_sentence() {
    let p = Vocab::PERIOD;
    let s = segment(&[Vocab::BOS, Vocab::ARTICLE, 9, p], 2);
    assert_eq!((s.previous, s.current), (2..2, 2..6));
    let s = segment(&[Vocab::BOS, Vocab::ARTICLE, 9, p, Vocab::ARTICLE], 2);
    assert_eq!((s.previous, s.current), (2..6, 6..7));
}

#[test]
fn manipulations_keep_text_and_params() {
    let (ds, params) = common::tiny_testbed(6, 1, 15);
    let before = params.clone();
    for mode in ManipulationMode::ALL {
        let m = Manipulation::new(mode);
        for ex in &ds.train {
            let ctx = manipulate(ex, &m, &ds.train, &mut stream_rng(1, 2)).unwrap();
            assert_eq!(ctx.features.ncols(), ex.features.tokens.ncols());
            let n = ex.inputs().len();
            assert!(ctx.masked_text.end <= n);
            match mode {
                ManipulationMode::None => assert_eq!(ctx.features, ex.features.tokens),
                ManipulationMode::ImagePlus => assert_eq!(ctx.features.nrows(), 2 * ex.features.tokens.nrows()),
                ManipulationMode::TextMinus => {
                    assert_eq!(ctx.masked_text.start, 1);
                    assert_eq!(ctx.masked_text.len(), ((n - 1) as f64 * 0.25).ceil() as usize);
                }
                _ => assert_eq!(ctx.features.nrows(), ex.features.tokens.nrows()),
            }
        }
    }
    let curves = tendency_report(&params, &ds.train, &Manipulation::default()).unwrap();
    let names: Vec<&str> = curves.iter().map(|c| c.mode.name()).collect();
    assert_eq!(names, ["none", "image_minus", "image_plus", "image_replace", "text_minus"]);
    assert_eq!(params, before);
}

#[test]
fn image_edits_need_a_donor() {
    let (ds, _) = common::tiny_testbed(1, 1, 16);
    let m = Manipulation::new(ManipulationMode::ImageReplace);
    assert!(manipulate(&ds.train[0], &m, &ds.train, &mut stream_rng(0, 0)).is_err());
}

#[test]
fn invalid_manipulation_rejected() {
    let (ds, _) = common::tiny_testbed(2, 1, 17);
    let bad = [
        Manipulation { noise_steps: 2000, ..Manipulation::new(ManipulationMode::ImageMinus) },
        Manipulation { beta_end: 1.5, ..Default::default() },
        Manipulation { mask_frac: 2.0, ..Default::default() },
        Manipulation { noise_std: Some(-1.0), ..Default::default() },
    ];
    for m in bad {
        assert!(manipulate(&ds.train[0], &m, &ds.train, &mut stream_rng(0, 0)).is_err());
    }
}

#[test]
fn full_noise_approaches_target_scale() {
    let (ds, _) = common::tiny_testbed(1, 1, 18);
    let m = Manipulation {
        noise_steps: 1000,
        noise_std: Some(1.0),
        ..Manipulation::new(ManipulationMode::ImageMinus)
    };
    let ctx = manipulate(&ds.train[0], &m, &ds.train, &mut stream_rng(3, 4)).unwrap();
    // alpha_bar over the full schedule is ~4e-5, so the result is almost pure noise
    let x = &ctx.features;
    let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    assert!((var - 1.0).abs() < 0.25, "variance {var}");
}

#[test]
fn exp_fit_recovers_exact_curve() {
    let pts: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 / 10.0, 0.2 * (1.5 * i as f64 / 10.0).exp())).collect();
    let (a, b, rmse) = exp_fit(&pts);
    assert!((a - 0.2).abs() < 1e-9 && (b - 1.5).abs() < 1e-9 && rmse < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn segments_tile_the_context(body in prop::collection::vec(prop_oneof![Just(Vocab::PERIOD), Just(Vocab::ARTICLE), Just(7usize)], 0..20), slots in 0usize..6) {
        let mut tokens = vec![Vocab::BOS];
        tokens.extend(body);
        let s = segment(&tokens, slots);
        prop_assert_eq!(s.slots.end, s.previous.start);
        prop_assert_eq!(s.previous.end, s.current.start);
        prop_assert_eq!(s.current.end, slots + tokens.len());
        prop_assert!(!s.current.is_empty());
        // previous sentences are whole sentences
        if !s.previous.is_empty() {
            prop_assert_eq!(tokens[s.previous.end - slots - 1], Vocab::PERIOD);
        }
    }
}
