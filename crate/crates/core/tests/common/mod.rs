//! Test-only oracles, independent of the reverse pass they check.
#![allow(dead_code)]

use eosbench::objectives::{ObjectiveHandle, ObjectiveKind, ObjectiveSpec};
use eosbench::tinylm::{forward, forward_with, AttnPerturbation, ForwardOptions, ModelConfig, Params};
use ndarray::Array2;

pub const REL_TOL: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_seq: 12,
        vocab_size: 10,
        scene_slots: 3,
        feature_dim: 4,
        positional: true,
    }
}

pub fn micro_features() -> Array2<f64> {
    Array2::from_shape_fn((3, 4), |(i, j)| (0.7 * (i * 4 + j) as f64).cos())
}

/// Loss by a plain forward pass plus an independent log-softmax.
pub fn direct_loss(params: &Params, features: &Array2<f64>, tokens: &[usize], labels: &[usize], handle: ObjectiveHandle) -> f64 {
    let logits = forward(params, features, tokens).unwrap().logits;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).to_vec();
        let excluded = match handle {
            ObjectiveHandle::Selective { eos } if y != eos => Some(eos),
            _ => None,
        };
        let denom: f64 = row
            .iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != excluded)
            .map(|(_, z)| z.exp())
            .sum();
        total += -(row[y].exp() / denom).ln();
    }
    total / labels.len() as f64
}

/// Central-difference gradient of `f` with respect to every parameter.
pub fn fd_gradient(params: &Params, mut f: impl FnMut(&Params) -> f64) -> Vec<f64> {
    let flat = params.flatten();
    let mut p = params.clone();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += FD_STEP;
        p.unflatten(&plus).unwrap();
        let fp = f(&p);
        let mut minus = flat.clone();
        minus[i] -= FD_STEP;
        p.unflatten(&minus).unwrap();
        let fm = f(&p);
        out.push((fp - fm) / (2.0 * FD_STEP));
    }
    out
}

pub fn close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= abs + rel * analytic.abs().max(numeric.abs())
}

/// `dL/dA[layer][head][row, col]` by perturbing the attention entry itself.
#[allow(clippy::too_many_arguments)]
pub fn fd_attention(
    params: &Params,
    features: &Array2<f64>,
    tokens: &[usize],
    target: usize,
    layer: usize,
    head: usize,
    row: usize,
    col: usize,
) -> f64 {
    let h = 1e-6;
    let loss = |delta: f64| {
        let opts = ForwardOptions {
            masked_text: 0..0,
            perturb: Some(AttnPerturbation { layer, head, row, col, delta }),
        };
        let logits = forward_with(params, features, tokens, &opts).unwrap().logits;
        let last = logits.row(logits.nrows() - 1);
        let m = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + last.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        lse - last[target]
    };
    (loss(h) - loss(-h)) / (2.0 * h)
}

pub fn objective_specs() -> Vec<(&'static str, ObjectiveSpec)> {
    vec![
        ("mle", ObjectiveSpec::new(ObjectiveKind::Mle)),
        ("selective", ObjectiveSpec::new(ObjectiveKind::Selective)),
        ("combined", ObjectiveSpec::new(ObjectiveKind::Combined)),
    ]
}

/// A small default-grammar dataset and a matching randomly initialized model.
pub fn tiny_testbed(train: usize, test: usize, seed: u64) -> (eosbench::scenegen::Dataset, Params) {
    let dcfg = eosbench::scenegen::DatasetConfig {
        train_size: train,
        test_size: test,
        train_seed_start: seed * 10_000,
        ..Default::default()
    };
    let ds = eosbench::scenegen::build_dataset(&dcfg).unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        feature_dim: dcfg.perception.feature_dim,
        scene_slots: dcfg.perception.scene_slots,
        vocab_size: dcfg.vocab().len(),
        ..ModelConfig::default()
    };
    let params = eosbench::tinylm::init_params(&cfg, seed).unwrap();
    (ds, params)
}
