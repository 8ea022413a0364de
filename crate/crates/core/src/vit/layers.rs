//! Transformer building blocks with hand-written backward passes.
//!
//! Every `*_forward` returns its output plus the cache its `*_backward`
//! needs. Backward functions accumulate parameter gradients into a
//! [`ParameterStore`] laid out like the parameters and return `dL/dinput`.

use super::params::{ParamId, ParameterStore, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    /// Xavier-uniform weights (`in × out`), zero bias.
    pub fn init(store: &mut ParameterStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let w: Vec<f64> = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
        Self {
            w: store.insert(&format!("{name}.weight"), Tensor::from_vec(&[d_in, d_out], w), true),
            b: store.insert(&format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub fn init(store: &mut ParameterStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(&format!("{name}.weight"), Tensor::filled(&[dim], 1.0), true),
            beta: store.insert(&format!("{name}.bias"), Tensor::zeros(&[dim]), true),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub norm1: NormIds,
    pub qkv: LinearIds,
    pub proj: LinearIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

impl BlockIds {
    pub fn init(store: &mut ParameterStore, name: &str, dim: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: NormIds::init(store, &format!("{name}.norm1"), dim),
            qkv: LinearIds::init(store, &format!("{name}.attn.qkv"), dim, 3 * dim, rng),
            proj: LinearIds::init(store, &format!("{name}.attn.proj"), dim, dim, rng),
            norm2: NormIds::init(store, &format!("{name}.norm2"), dim),
            fc1: LinearIds::init(store, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim, rng),
            fc2: LinearIds::init(store, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim, rng),
        }
    }
}

pub(crate) fn linear_forward(x: ArrayView2<f64>, p: &ParameterStore, ids: LinearIds) -> Array2<f64> {
    let mut y = x.dot(&p.mat(ids.w));
    y += &p.vec(ids.b);
    y
}

pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    p: &ParameterStore,
    ids: LinearIds,
    grads: &mut ParameterStore,
) -> Array2<f64> {
    general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grads.mat_mut(ids.w));
    let mut db = grads.vec_mut(ids.b);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&p.mat(ids.w).t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

pub(crate) fn layer_norm_forward(x: ArrayView2<f64>, p: &ParameterStore, ids: NormIds) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let mut y = &xhat * &p.vec(ids.gamma);
    y += &p.vec(ids.beta);
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &NormCache,
    p: &ParameterStore,
    ids: NormIds,
    grads: &mut ParameterStore,
) -> Array2<f64> {
    {
        let mut dgamma = grads.vec_mut(ids.gamma);
        dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    }
    {
        let mut dbeta = grads.vec_mut(ids.beta);
        dbeta += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = &dy * &p.vec(ids.gamma);
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.rstd) {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &h| *g = r * (*g - mean_d - h * mean_dx));
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) struct AttnCache {
    input: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(crate) fn attention_forward(
    x: Array2<f64>,
    heads: usize,
    p: &ParameterStore,
    qkv_ids: LinearIds,
    proj_ids: LinearIds,
) -> (Array2<f64>, AttnCache) {
    let (t, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = linear_forward(x.view(), p, qkv_ids);
    let mut context = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut scores = q.dot(&k.t());
        scores *= scale;
        softmax_rows(&mut scores);
        context.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
        probs.push(scores);
    }
    let out = linear_forward(context.view(), p, proj_ids);
    (
        out,
        AttnCache {
            input: x,
            qkv,
            probs,
            context,
        },
    )
}

pub(crate) fn attention_backward(
    dout: ArrayView2<f64>,
    cache: &AttnCache,
    heads: usize,
    p: &ParameterStore,
    qkv_ids: LinearIds,
    proj_ids: LinearIds,
    grads: &mut ParameterStore,
) -> Array2<f64> {
    let (t, d) = cache.input.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dcontext = linear_backward(cache.context.view(), dout, p, proj_ids, grads);
    let mut dqkv = Array2::zeros((t, 3 * d));
    for h in 0..heads {
        let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let pr = &cache.probs[h];
        let dctx = dcontext.slice(s![.., h * dh..(h + 1) * dh]);
        let dp = dctx.dot(&v.t());
        dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
            .assign(&pr.t().dot(&dctx));
        let mut ds = dp;
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            Zip::from(&mut drow).and(&prow).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
        }
        dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&k));
        dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
            .assign(&ds.t().dot(&q));
    }
    linear_backward(cache.input.view(), dqkv.view(), p, qkv_ids, grads)
}

pub(crate) struct BlockCache {
    norm1: NormCache,
    attn: AttnCache,
    norm2: NormCache,
    mlp_in: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `+ mlp(ln(·))`.
pub(crate) fn block_forward(
    x: &Array2<f64>,
    heads: usize,
    p: &ParameterStore,
    ids: &BlockIds,
) -> (Array2<f64>, BlockCache) {
    let (a, norm1) = layer_norm_forward(x.view(), p, ids.norm1);
    let (attn_out, attn) = attention_forward(a, heads, p, ids.qkv, ids.proj);
    let h1 = x + &attn_out;
    let (mlp_in, norm2) = layer_norm_forward(h1.view(), p, ids.norm2);
    let pre_act = linear_forward(mlp_in.view(), p, ids.fc1);
    let act = pre_act.mapv(gelu);
    let out = h1 + &linear_forward(act.view(), p, ids.fc2);
    (
        out,
        BlockCache {
            norm1,
            attn,
            norm2,
            mlp_in,
            pre_act,
            act,
        },
    )
}

pub(crate) fn block_backward(
    dy: &Array2<f64>,
    cache: &BlockCache,
    heads: usize,
    p: &ParameterStore,
    ids: &BlockIds,
    grads: &mut ParameterStore,
) -> Array2<f64> {
    let mut dact = linear_backward(cache.act.view(), dy.view(), p, ids.fc2, grads);
    Zip::from(&mut dact).and(&cache.pre_act).for_each(|g, &z| *g *= gelu_grad(z));
    let dmlp_in = linear_backward(cache.mlp_in.view(), dact.view(), p, ids.fc1, grads);
    let mut dh1 = layer_norm_backward(dmlp_in.view(), &cache.norm2, p, ids.norm2, grads);
    dh1 += dy;
    let da = attention_backward(dh1.view(), &cache.attn, heads, p, ids.qkv, ids.proj, grads);
    let dx = layer_norm_backward(da.view(), &cache.norm1, p, ids.norm1, grads);
    dh1 + dx
}
