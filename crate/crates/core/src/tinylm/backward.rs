use ndarray::{s, Array1, Array2, Axis};

use super::forward::{gelu_grad, LnCache};
use super::{ForwardTrace, Grads, Params};

pub struct BackwardOutput {
    pub grads: Grads,
    /// `d_attn[layer][head]`: gradient of the loss with respect to each
    /// post-softmax attention matrix.
    pub d_attn: Vec<Vec<Array2<f64>>>,
}

fn layer_norm_backward(dy: &Array2<f64>, g: &Array1<f64>, cache: &LnCache) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dg = (dy * &cache.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), &rstd) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.dot(&xh) / d;
        for ((o, &a), &x) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = rstd * (a - mean_d - x * mean_dx);
        }
    }
    (dx, dg, db)
}

/// Reverse pass from `dlogits` (`[n_text × vocab]`) to every parameter.
pub fn backward(params: &Params, trace: &ForwardTrace, dlogits: &Array2<f64>) -> BackwardOutput {
    let cfg = &params.config;
    let (n_slots, ctx) = (trace.n_slots, trace.ctx_len());
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = params.zeros_like();

    grads.out_w = trace.f_text.t().dot(dlogits);
    let mut df = Array2::<f64>::zeros((ctx, cfg.d_model));
    df.slice_mut(s![n_slots.., ..]).assign(&dlogits.dot(&params.out_w.t()));
    let (mut dx, dg, db) = layer_norm_backward(&df, &params.lnf_g, &trace.lnf);
    grads.lnf_g = dg;
    grads.lnf_b = db;

    let mut d_attn = vec![Vec::new(); cfg.n_layers];
    for li in (0..cfg.n_layers).rev() {
        let lp = &params.layers[li];
        let lc = &trace.layers[li];
        let gl = &mut grads.layers[li];

        // feed-forward block
        gl.w2 = lc.g.t().dot(&dx);
        gl.b2 = dx.sum_axis(Axis(0));
        let mut du = dx.dot(&lp.w2.t());
        du.zip_mut_with(&lc.u, |d, &u| *d *= gelu_grad(u));
        gl.w1 = lc.b.t().dot(&du);
        gl.b1 = du.sum_axis(Axis(0));
        let dbn = du.dot(&lp.w1.t());
        let (dmid, dg2, db2) = layer_norm_backward(&dbn, &lp.ln2_g, &lc.ln2);
        gl.ln2_g = dg2;
        gl.ln2_b = db2;
        dx += &dmid;

        // attention block
        gl.wo = lc.o.t().dot(&dx);
        let d_o = dx.dot(&lp.wo.t());
        let mut dq = Array2::<f64>::zeros((ctx, cfg.d_model));
        let mut dk = Array2::<f64>::zeros((ctx, cfg.d_model));
        let mut dv = Array2::<f64>::zeros((ctx, cfg.d_model));
        let mut layer_da = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let a = &trace.attn[li][h];
            let doh = d_o.slice(cols);
            let da = doh.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&doh));
            let mut dscore = Array2::<f64>::zeros((ctx, ctx));
            for ((mut ds, arow), darow) in dscore.rows_mut().into_iter().zip(a.rows()).zip(da.rows()) {
                let inner = arow.dot(&darow);
                for ((o, &p), &g) in ds.iter_mut().zip(arow.iter()).zip(darow.iter()) {
                    *o = p * (g - inner) * scale;
                }
            }
            dq.slice_mut(cols).assign(&dscore.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&dscore.t().dot(&lc.q.slice(cols)));
            layer_da.push(da);
        }
        d_attn[li] = layer_da;
        gl.wq = lc.a.t().dot(&dq);
        gl.wk = lc.a.t().dot(&dk);
        gl.wv = lc.a.t().dot(&dv);
        let dan = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        let (dxin, dg1, db1) = layer_norm_backward(&dan, &lp.ln1_g, &lc.ln1);
        gl.ln1_g = dg1;
        gl.ln1_b = db1;
        dx += &dxin;
    }

    if n_slots > 0 {
        let dslots = dx.slice(s![..n_slots, ..]);
        grads.feat_w = trace.features.t().dot(&dslots);
        grads.feat_b = dslots.sum_axis(Axis(0));
    }
    for (i, &t) in trace.tokens.iter().enumerate() {
        let row = dx.row(n_slots + i);
        let mut te = grads.tok_emb.row_mut(t);
        te += &row;
        if cfg.positional {
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &row;
        }
    }

    BackwardOutput { grads, d_attn }
}
