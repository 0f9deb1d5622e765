use ndarray::{s, Array1, Array2, Axis};

use super::Params;
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Adds `delta` to one post-softmax attention entry; used by finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnPerturbation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardOptions {
    /// Text positions in this range are hidden from every later text position.
    pub masked_text: std::ops::Range<usize>,
    pub perturb: Option<AttnPerturbation>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub o: Array2<f64>,
    pub ln2: LnCache,
    pub b: Array2<f64>,
    pub u: Array2<f64>,
    pub g: Array2<f64>,
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[n_text × vocab]`; row `i` predicts text token `i + 1`.
    pub logits: Array2<f64>,
    /// `attn[layer][head]` is `[ctx × ctx]` with `ctx = n_slots + n_text`.
    pub attn: Vec<Vec<Array2<f64>>>,
    pub n_slots: usize,
    pub n_text: usize,
    pub(crate) features: Array2<f64>,
    pub(crate) tokens: Vec<usize>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) lnf: LnCache,
    pub(crate) f_text: Array2<f64>,
}

impl ForwardTrace {
    pub fn ctx_len(&self) -> usize {
        self.n_slots + self.n_text
    }
}

/// Whether context position `i` may attend to `j`.
pub(crate) fn attends(i: usize, j: usize, n_slots: usize, masked: &std::ops::Range<usize>) -> bool {
    if j < n_slots {
        return true;
    }
    if i < n_slots || j > i {
        return false;
    }
    let (ti, tj) = (i - n_slots, j - n_slots);
    !(ti >= masked.end && masked.contains(&tj))
}

pub(crate) fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| (v - mean) * rs);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn forward(params: &Params, features: &Array2<f64>, tokens: &[usize]) -> Result<ForwardTrace> {
    forward_with(params, features, tokens, &ForwardOptions::default())
}

pub fn forward_with(
    params: &Params,
    features: &Array2<f64>,
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let (n_slots, n_text) = (features.nrows(), tokens.len());
    if n_text == 0 {
        return Err(Error::Config("empty token sequence".into()));
    }
    if n_text > cfg.max_seq {
        return Err(Error::Length {
            len: n_text,
            max: cfg.max_seq,
        });
    }
    if features.ncols() != cfg.feature_dim {
        return Err(Error::Config(format!(
            "feature rows have {} columns, model expects {}",
            features.ncols(),
            cfg.feature_dim
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Config(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }

    let ctx = n_slots + n_text;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::<f64>::zeros((ctx, d));
    if n_slots > 0 {
        let slots = features.dot(&params.feat_w) + &params.feat_b;
        x.slice_mut(s![..n_slots, ..]).assign(&slots);
    }
    for (i, &t) in tokens.iter().enumerate() {
        let mut row = x.row_mut(n_slots + i);
        row.assign(&params.tok_emb.row(t));
        if cfg.positional {
            row += &params.pos_emb.row(i);
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut attn = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let q = a.dot(&lp.wq);
        let k = a.dot(&lp.wk);
        let v = a.dot(&lp.wv);
        let mut o = Array2::<f64>::zeros((ctx, d));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
                let mut m = f64::NEG_INFINITY;
                for (j, z) in row.iter_mut().enumerate() {
                    if attends(i, j, n_slots, &opts.masked_text) {
                        *z *= scale;
                        m = m.max(*z);
                    }
                }
                let mut sum = 0.0;
                for (j, z) in row.iter_mut().enumerate() {
                    if attends(i, j, n_slots, &opts.masked_text) {
                        *z = (*z - m).exp();
                        sum += *z;
                    } else {
                        *z = 0.0;
                    }
                }
                row.mapv_inplace(|z| z / sum);
            }
            if let Some(pt) = opts.perturb {
                if pt.layer == li && pt.head == h {
                    p[[pt.row, pt.col]] += pt.delta;
                }
            }
            o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            heads.push(p);
        }
        let x_mid = &x + &o.dot(&lp.wo);
        let (b, ln2) = layer_norm(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let u = b.dot(&lp.w1) + &lp.b1;
        let g = u.mapv(gelu);
        x = &x_mid + &(g.dot(&lp.w2) + &lp.b2);
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            o,
            ln2,
            b,
            u,
            g,
        });
        attn.push(heads);
    }

    let (f, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let f_text = f.slice(s![n_slots.., ..]).to_owned();
    let logits = f_text.dot(&params.out_w);

    Ok(ForwardTrace {
        logits,
        attn,
        n_slots,
        n_text,
        features: features.clone(),
        tokens: tokens.to_vec(),
        layers,
        lnf,
        f_text,
    })
}
