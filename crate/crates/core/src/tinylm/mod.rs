//! A small pre-LayerNorm causal decoder over `[scene slots ++ text tokens]`.
//!
//! Scene slots form a bidirectional prefix without positional information, so
//! the model treats them as a set and accepts any slot count at inference.
//! Text positions attend causally to earlier text and to every slot.

mod backward;
pub mod checkpoint;
mod forward;
mod generate;
pub mod optim;

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::stream_rng;

pub use backward::{backward, BackwardOutput};
pub use forward::{forward, forward_with, AttnPerturbation, ForwardOptions, ForwardTrace};
pub use generate::{generate, DecodeConfig};

const STREAM_INIT: u64 = 11;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub vocab_size: usize,
    /// Nominal slot count; forward accepts any number of slots.
    pub scene_slots: usize,
    pub feature_dim: usize,
    /// Learned absolute position embeddings for text tokens. Without them
    /// order is only implicit in the causal mask.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_seq: 32,
            vocab_size: 64,
            scene_slots: 5,
            feature_dim: 32,
            positional: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
            ("vocab_size", self.vocab_size),
            ("scene_slots", self.scene_slots),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model: {name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "model: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub feat_w: Array2<f64>,
    pub feat_b: Array1<f64>,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub out_w: Array2<f64>,
}

pub type Grads = Params;

macro_rules! visit_fields {
    ($self:ident, $f:ident, $as_slice:ident, $iter:ident) => {{
        $f("feat_w", $self.feat_w.$as_slice().expect("standard layout"));
        $f("feat_b", $self.feat_b.$as_slice().expect("standard layout"));
        $f("tok_emb", $self.tok_emb.$as_slice().expect("standard layout"));
        $f("pos_emb", $self.pos_emb.$as_slice().expect("standard layout"));
        for (i, l) in $self.layers.$iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            $f(&p("ln1_g"), l.ln1_g.$as_slice().expect("standard layout"));
            $f(&p("ln1_b"), l.ln1_b.$as_slice().expect("standard layout"));
            $f(&p("wq"), l.wq.$as_slice().expect("standard layout"));
            $f(&p("wk"), l.wk.$as_slice().expect("standard layout"));
            $f(&p("wv"), l.wv.$as_slice().expect("standard layout"));
            $f(&p("wo"), l.wo.$as_slice().expect("standard layout"));
            $f(&p("ln2_g"), l.ln2_g.$as_slice().expect("standard layout"));
            $f(&p("ln2_b"), l.ln2_b.$as_slice().expect("standard layout"));
            $f(&p("w1"), l.w1.$as_slice().expect("standard layout"));
            $f(&p("b1"), l.b1.$as_slice().expect("standard layout"));
            $f(&p("w2"), l.w2.$as_slice().expect("standard layout"));
            $f(&p("b2"), l.b2.$as_slice().expect("standard layout"));
        }
        $f("lnf_g", $self.lnf_g.$as_slice().expect("standard layout"));
        $f("lnf_b", $self.lnf_b.$as_slice().expect("standard layout"));
        $f("out_w", $self.out_w.$as_slice().expect("standard layout"));
    }};
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, config.d_ff)),
            b1: Array1::zeros(config.d_ff),
            w2: Array2::zeros((config.d_ff, d)),
            b2: Array1::zeros(d),
        };
        Params {
            config: config.clone(),
            feat_w: Array2::zeros((config.feature_dim, d)),
            feat_b: Array1::zeros(d),
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_seq, d)),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            out_w: Array2::zeros((d, config.vocab_size)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Visits every tensor in a fixed canonical order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        visit_fields!(self, f, as_slice, iter);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        visit_fields!(self, f, as_slice_mut, iter_mut);
    }

    /// `(name, shape)` for every tensor, in visit order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (d, ff) = (c.d_model, c.d_ff);
        let mut out = vec![
            ("feat_w".to_string(), vec![c.feature_dim, d]),
            ("feat_b".to_string(), vec![d]),
            ("tok_emb".to_string(), vec![c.vocab_size, d]),
            ("pos_emb".to_string(), vec![c.max_seq, d]),
        ];
        for i in 0..c.n_layers {
            for (n, s) in [
                ("ln1_g", vec![d]),
                ("ln1_b", vec![d]),
                ("wq", vec![d, d]),
                ("wk", vec![d, d]),
                ("wv", vec![d, d]),
                ("wo", vec![d, d]),
                ("ln2_g", vec![d]),
                ("ln2_b", vec![d]),
                ("w1", vec![d, ff]),
                ("b1", vec![ff]),
                ("w2", vec![ff, d]),
                ("b2", vec![d]),
            ] {
                out.push((format!("layers.{i}.{n}"), s));
            }
        }
        out.push(("lnf_g".to_string(), vec![d]));
        out.push(("lnf_b".to_string(), vec![d]));
        out.push(("out_w".to_string(), vec![d, c.vocab_size]));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, s| n += s.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(|_, s| out.extend_from_slice(s));
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        self.visit_mut(|_, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, s| ok &= s.iter().all(|x| x.is_finite()));
        ok
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &Params) {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut(|_, s| {
            let n = s.len();
            for (x, g) in s.iter_mut().zip(&flat[off..off + n]) {
                *x += scale * g;
            }
            off += n;
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(|_, s| s.iter_mut().for_each(|x| *x *= factor));
    }

    pub fn sq_norm(&self) -> f64 {
        let mut n = 0.0;
        self.visit(|_, s| n += s.iter().map(|x| x * x).sum::<f64>());
        n
    }
}

/// Standard deviation used by [`init_params`] for a tensor, `None` for LayerNorm
/// gains (ones) and biases (zeros).
pub fn init_std(config: &ModelConfig, name: &str) -> Option<f64> {
    let d = config.d_model as f64;
    let resid = (2.0 * config.n_layers as f64).sqrt();
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match leaf {
        "feat_w" => Some(1.0 / (config.feature_dim as f64).sqrt()),
        "tok_emb" => Some(1.0 / d.sqrt()),
        "pos_emb" if config.positional => Some(1.0 / d.sqrt()),
        "wq" | "wk" | "wv" | "w1" | "out_w" => Some(1.0 / d.sqrt()),
        "wo" => Some(1.0 / d.sqrt() / resid),
        "w2" => Some(1.0 / (config.d_ff as f64).sqrt() / resid),
        _ => None,
    }
}

/// Scaled-normal initialization; deterministic in `(config, seed)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut params = Params::zeros(config);
    let mut rng = stream_rng(seed, STREAM_INIT);
    let cfg = config.clone();
    params.visit_mut(|name, s| match init_std(&cfg, name) {
        Some(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            s.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
        None if name.ends_with("_g") => s.fill(1.0),
        None => s.fill(0.0),
    });
    Ok(params)
}

/// Numerically stable `log(sum(exp(row)))` over the entries selected by `keep`.
pub fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + row.map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Loss value and parameter gradients for one example.
pub fn loss_and_grads(
    params: &Params,
    features: &Array2<f64>,
    tokens: &[usize],
    labels: &[usize],
    objective: crate::objectives::ObjectiveHandle,
) -> Result<(f64, Grads)> {
    let trace = forward(params, features, tokens)?;
    let out = objective.evaluate(&trace.logits, labels)?;
    if !out.loss.is_finite() {
        return Err(Error::Numeric(format!("loss = {}", out.loss)));
    }
    let grads = backward(params, &trace, &out.dlogits).grads;
    Ok((out.loss, grads))
}

/// Softmax probability of `eos` at each requested text position.
pub fn eos_probability(trace: &ForwardTrace, positions: &[usize], eos: usize) -> Result<Vec<f64>> {
    positions
        .iter()
        .map(|&p| {
            if p >= trace.logits.nrows() {
                return Err(Error::Target {
                    target: p,
                    len: trace.logits.nrows(),
                });
            }
            let row = trace.logits.row(p);
            let lse = log_sum_exp(row.iter().copied());
            Ok((row[eos] - lse).exp())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq: 10,
            vocab_size: 12,
            scene_slots: 3,
            feature_dim: 4,
            positional: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small(), 3).unwrap();
        assert_eq!(a, init_params(&small(), 3).unwrap());
        assert_ne!(a, init_params(&small(), 4).unwrap());
        assert!(a.all_finite());
    }

    #[test]
    fn bad_head_count_rejected() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..small()
        };
        assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn init_moments_match_distribution() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 9).unwrap();
        p.visit(|name, s| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            match init_std(&cfg, name) {
                Some(std) => {
                    // standard errors of the sample mean and variance
                    assert!(mean.abs() < 5.0 * std / n.sqrt(), "{name}: mean {mean}");
                    let se_var = std * std * (2.0 / n).sqrt();
                    assert!((var - std * std).abs() < 5.0 * se_var, "{name}: var {var} vs {}", std * std);
                }
                None => assert_eq!(var, 0.0, "{name}"),
            }
        });
    }

    #[test]
    fn shapes_cover_every_tensor() {
        let p = init_params(&small(), 0).unwrap();
        let mut seen = Vec::new();
        p.visit(|name, s| seen.push((name.to_string(), s.len())));
        let shapes = p.shapes();
        assert_eq!(seen.len(), shapes.len());
        for ((n1, len), (n2, shape)) in seen.iter().zip(&shapes) {
            assert_eq!(n1, n2);
            assert_eq!(*len, shape.iter().product::<usize>());
        }
    }

    #[test]
    fn flatten_round_trip() {
        let p = init_params(&small(), 1).unwrap();
        let mut q = p.zeros_like();
        q.unflatten(&p.flatten()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(v.iter().copied()) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
