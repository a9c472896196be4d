//! Pre-norm single-head transformer blocks with cached activations for the
//! hand-written backward pass.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

use super::store::{Tower, WeightStore, WeightType};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct LnCache {
    normed: Matrix,
    inv_std: Vec<f64>,
}

/// Row-wise layer norm without affine parameters.
fn layer_norm(x: &Matrix) -> LnCache {
    let (rows, cols) = x.shape();
    let mut normed = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    LnCache { normed, inv_std }
}

fn layer_norm_backward(cache: &LnCache, d_out: &Matrix) -> Matrix {
    let (rows, cols) = d_out.shape();
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let dy = d_out.row(r);
        let y = cache.normed.row(r);
        let mean_dy = dy.iter().sum::<f64>() / cols as f64;
        let mean_dy_y = dot(dy, y) / cols as f64;
        let inv = cache.inv_std[r];
        for ((o, &g), &yv) in dx.row_mut(r).iter_mut().zip(dy).zip(y) {
            *o = inv * (g - mean_dy - yv * mean_dy_y);
        }
    }
    dx
}

fn softmax_rows(scores: &mut Matrix, causal: bool) {
    let (rows, cols) = scores.shape();
    for r in 0..rows {
        let limit = if causal { r + 1 } else { cols };
        let row = scores.row_mut(r);
        let max = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row[..limit].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..limit].iter_mut() {
            *v /= sum;
        }
        for v in row[limit..].iter_mut() {
            *v = 0.0;
        }
    }
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    ctx: Matrix,
    ln2: LnCache,
    up: Matrix,
    act: Matrix,
}

/// Gradients of the six per-layer matrices, in [`WeightType::PER_LAYER`]
/// order.
pub(crate) struct BlockGrads(pub [Matrix; 6]);

struct BlockWeights<'a> {
    wq: &'a Matrix,
    wk: &'a Matrix,
    wv: &'a Matrix,
    wo: &'a Matrix,
    wup: &'a Matrix,
    wdown: &'a Matrix,
}

impl<'a> BlockWeights<'a> {
    fn of(store: &'a WeightStore, tower: Tower, layer: usize) -> Self {
        BlockWeights {
            wq: store.w(tower, layer, WeightType::Wq),
            wk: store.w(tower, layer, WeightType::Wk),
            wv: store.w(tower, layer, WeightType::Wv),
            wo: store.w(tower, layer, WeightType::Wo),
            wup: store.w(tower, layer, WeightType::Wup),
            wdown: store.w(tower, layer, WeightType::Wdown),
        }
    }
}

fn block_forward(x: &Matrix, w: &BlockWeights, causal: bool) -> (Matrix, BlockCache) {
    let ln1 = layer_norm(x);
    let q = ln1.normed.matmul(w.wq);
    let k = ln1.normed.matmul(w.wk);
    let v = ln1.normed.matmul(w.wv);
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut probs = q.matmul_t(&k).scale(scale);
    softmax_rows(&mut probs, causal);
    let ctx = probs.matmul(&v);
    let h1 = x.add(&ctx.matmul(w.wo));

    let ln2 = layer_norm(&h1);
    let up = ln2.normed.matmul(w.wup);
    let mut act = up.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let out = h1.add(&act.matmul(w.wdown));
    (out, BlockCache { ln1, q, k, v, probs, ctx, ln2, up, act })
}

fn block_backward(c: &BlockCache, w: &BlockWeights, d_out: &Matrix) -> (Matrix, BlockGrads) {
    // Feed-forward sublayer.
    let d_wdown = c.act.t_matmul(d_out);
    let mut d_up = d_out.matmul_t(w.wdown);
    for (g, &u) in d_up.as_mut_slice().iter_mut().zip(c.up.as_slice()) {
        *g *= gelu_grad(u);
    }
    let d_wup = c.ln2.normed.t_matmul(&d_up);
    let mut d_h1 = d_out.clone();
    d_h1.add_assign(&layer_norm_backward(&c.ln2, &d_up.matmul_t(w.wup)));

    // Attention sublayer.
    let d_wo = c.ctx.t_matmul(&d_h1);
    let d_ctx = d_h1.matmul_t(w.wo);
    let d_probs = d_ctx.matmul_t(&c.v);
    let d_v = c.probs.t_matmul(&d_ctx);
    let scale = 1.0 / (c.q.cols() as f64).sqrt();
    let mut d_scores = Matrix::zeros(c.probs.rows(), c.probs.cols());
    for r in 0..c.probs.rows() {
        let p = c.probs.row(r);
        let dp = d_probs.row(r);
        let inner = dot(p, dp);
        for ((o, &pv), &dpv) in d_scores.row_mut(r).iter_mut().zip(p).zip(dp) {
            *o = pv * (dpv - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&c.k);
    let d_k = d_scores.t_matmul(&c.q);
    let a_in = &c.ln1.normed;
    let d_wq = a_in.t_matmul(&d_q);
    let d_wk = a_in.t_matmul(&d_k);
    let d_wv = a_in.t_matmul(&d_v);
    let mut d_a_in = d_q.matmul_t(w.wq);
    d_a_in.add_assign(&d_k.matmul_t(w.wk));
    d_a_in.add_assign(&d_v.matmul_t(w.wv));
    let mut d_x = d_h1;
    d_x.add_assign(&layer_norm_backward(&c.ln1, &d_a_in));
    (d_x, BlockGrads([d_wq, d_wk, d_wv, d_wo, d_wup, d_wdown]))
}

/// Activations of one full tower pass.
pub(crate) struct TowerTrace {
    pub tower: Tower,
    pub hidden: Matrix,
    caches: Vec<BlockCache>,
}

/// Runs every block of `tower` over the embedded sequence `x0`. Caches are
/// kept only when `record` is set.
pub(crate) fn run_tower(
    store: &WeightStore,
    tower: Tower,
    x0: Matrix,
    record: bool,
) -> Result<TowerTrace> {
    let causal = tower == Tower::Text;
    let mut x = x0;
    let mut caches = Vec::new();
    for layer in 0..store.config().n_layers(tower) {
        let w = BlockWeights::of(store, tower, layer);
        let (out, cache) = block_forward(&x, &w, causal);
        if !out.is_finite() {
            return Err(Error::Numeric(format!("non-finite activation in {tower} layer {layer}")));
        }
        if record {
            caches.push(cache);
        }
        x = out;
    }
    Ok(TowerTrace { tower, hidden: x, caches })
}

/// Back-propagates `d_hidden` through a recorded tower, returning the
/// gradient for each layer.
pub(crate) fn backprop_tower(
    store: &WeightStore,
    trace: &TowerTrace,
    d_hidden: Matrix,
) -> Vec<BlockGrads> {
    assert_eq!(
        trace.caches.len(),
        store.config().n_layers(trace.tower),
        "tower trace was not recorded"
    );
    let mut grads: Vec<BlockGrads> = Vec::with_capacity(trace.caches.len());
    let mut d = d_hidden;
    for (layer, cache) in trace.caches.iter().enumerate().rev() {
        let w = BlockWeights::of(store, trace.tower, layer);
        let (d_in, g) = block_backward(cache, &w, &d);
        grads.push(g);
        d = d_in;
    }
    grads.reverse();
    grads
}
