//! Pre-norm transformer block: `x + Attn(LN(x))` followed by
//! `x + FFN(LN(x))` with a ReLU feed-forward layer.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gamma: DMatrix<f64>,
    pub ln1_beta: DMatrix<f64>,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub ln2_gamma: DMatrix<f64>,
    pub ln2_beta: DMatrix<f64>,
    /// `E × F`.
    pub ff_w1: DMatrix<f64>,
    pub ff_b1: DMatrix<f64>,
    /// `F × E`.
    pub ff_w2: DMatrix<f64>,
    pub ff_b2: DMatrix<f64>,
}

impl BlockParams {
    pub fn zeros(dim: usize, ffn: usize) -> Self {
        Self {
            ln1_gamma: DMatrix::zeros(1, dim),
            ln1_beta: DMatrix::zeros(1, dim),
            wq: DMatrix::zeros(dim, dim),
            wk: DMatrix::zeros(dim, dim),
            wv: DMatrix::zeros(dim, dim),
            wo: DMatrix::zeros(dim, dim),
            ln2_gamma: DMatrix::zeros(1, dim),
            ln2_beta: DMatrix::zeros(1, dim),
            ff_w1: DMatrix::zeros(dim, ffn),
            ff_b1: DMatrix::zeros(1, ffn),
            ff_w2: DMatrix::zeros(ffn, dim),
            ff_b2: DMatrix::zeros(1, dim),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &DMatrix<f64>); 12] {
        [
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut DMatrix<f64>); 12] {
        [
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("ff_w1", &mut self.ff_w1),
            ("ff_b1", &mut self.ff_b1),
            ("ff_w2", &mut self.ff_w2),
            ("ff_b2", &mut self.ff_b2),
        ]
    }
}

/// Per-head attention probabilities, each `T × T` with rows summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub heads: Vec<DMatrix<f64>>,
}

pub(crate) struct LnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    h: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: Vec<DMatrix<f64>>,
    o: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
    ln2: LnCache,
    h2: DMatrix<f64>,
    z: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl BlockCache {
    pub(crate) fn trace(&self) -> AttentionTrace {
        AttentionTrace {
            heads: self.probs.clone(),
        }
    }
}

fn add_row(m: &mut DMatrix<f64>, row: &DMatrix<f64>) {
    for mut r in m.row_iter_mut() {
        r += row;
    }
}

fn col_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(1, m.ncols());
    for r in m.row_iter() {
        out += r;
    }
    out
}

fn ln_forward(x: &DMatrix<f64>, gamma: &DMatrix<f64>, beta: &DMatrix<f64>) -> (DMatrix<f64>, LnCache) {
    let (t, e) = x.shape();
    let mut xhat = DMatrix::zeros(t, e);
    let mut inv_std = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.mean();
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / e as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..e {
            xhat[(r, c)] = (x[(r, c)] - mean) * is;
        }
        inv_std.push(is);
    }
    let mut out = xhat.clone();
    for mut row in out.row_iter_mut() {
        row.component_mul_assign(gamma);
        row += beta;
    }
    (out, LnCache { xhat, inv_std })
}

fn ln_backward(
    dout: &DMatrix<f64>,
    cache: &LnCache,
    gamma: &DMatrix<f64>,
    dgamma: &mut DMatrix<f64>,
    dbeta: &mut DMatrix<f64>,
) -> DMatrix<f64> {
    let (t, e) = dout.shape();
    *dgamma += col_sums(&dout.component_mul(&cache.xhat));
    *dbeta += col_sums(dout);
    let mut dx = DMatrix::zeros(t, e);
    for r in 0..t {
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..e {
            let d = dout[(r, c)] * gamma[(0, c)];
            mean_d += d;
            mean_dx += d * cache.xhat[(r, c)];
        }
        mean_d /= e as f64;
        mean_dx /= e as f64;
        for c in 0..e {
            let d = dout[(r, c)] * gamma[(0, c)];
            dx[(r, c)] = cache.inv_std[r] * (d - mean_d - cache.xhat[(r, c)] * mean_dx);
        }
    }
    dx
}

fn softmax_rows(s: &mut DMatrix<f64>) {
    for mut row in s.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub(crate) fn block_forward(
    p: &BlockParams,
    x: &DMatrix<f64>,
    heads: usize,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> (DMatrix<f64>, BlockCache) {
    let (t, e) = x.shape();
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (h, ln1) = ln_forward(x, &p.ln1_gamma, &p.ln1_beta);
    let q = &h * &p.wq;
    let k = &h * &p.wk;
    let v = &h * &p.wv;
    let mut o = DMatrix::zeros(t, e);
    let mut probs = Vec::with_capacity(heads);
    for a in 0..heads {
        let qa = q.columns(a * dh, dh);
        let ka = k.columns(a * dh, dh);
        let va = v.columns(a * dh, dh);
        let mut s = (qa * ka.transpose()) * scale;
        softmax_rows(&mut s);
        o.columns_mut(a * dh, dh).copy_from(&(&s * va));
        probs.push(s);
    }
    let mut attn = &o * &p.wo;
    let mask = dropout.filter(|(_, rate)| *rate > 0.0).map(|(rng, rate)| {
        let keep = 1.0 / (1.0 - rate);
        DMatrix::from_fn(t, e, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep })
    });
    if let Some(m) = &mask {
        attn.component_mul_assign(m);
    }
    let x1 = x + attn;

    let (h2, ln2) = ln_forward(&x1, &p.ln2_gamma, &p.ln2_beta);
    let mut z = &h2 * &p.ff_w1;
    add_row(&mut z, &p.ff_b1);
    let r = z.map(|v| v.max(0.0));
    let mut ff = &r * &p.ff_w2;
    add_row(&mut ff, &p.ff_b2);
    let out = x1 + ff;

    (
        out,
        BlockCache {
            ln1,
            h,
            q,
            k,
            v,
            probs,
            o,
            mask,
            ln2,
            h2,
            z,
            r,
        },
    )
}

/// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
pub(crate) fn block_backward(
    p: &BlockParams,
    cache: &BlockCache,
    dout: &DMatrix<f64>,
    heads: usize,
    grad: &mut BlockParams,
) -> DMatrix<f64> {
    let (t, e) = dout.shape();
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // Feed-forward sublayer.
    let mut dx1 = dout.clone();
    grad.ff_w2 += cache.r.transpose() * dout;
    grad.ff_b2 += col_sums(dout);
    let dr = dout * p.ff_w2.transpose();
    let mut dz = dr;
    dz.zip_apply(&cache.z, |d, z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    grad.ff_w1 += cache.h2.transpose() * &dz;
    grad.ff_b1 += col_sums(&dz);
    let dh2 = &dz * p.ff_w1.transpose();
    dx1 += ln_backward(&dh2, &cache.ln2, &p.ln2_gamma, &mut grad.ln2_gamma, &mut grad.ln2_beta);

    // Attention sublayer.
    let mut dattn = dx1.clone();
    if let Some(m) = &cache.mask {
        dattn.component_mul_assign(m);
    }
    grad.wo += cache.o.transpose() * &dattn;
    let d_o = &dattn * p.wo.transpose();
    let mut dq = DMatrix::zeros(t, e);
    let mut dk = DMatrix::zeros(t, e);
    let mut dv = DMatrix::zeros(t, e);
    for a in 0..heads {
        let prob = &cache.probs[a];
        let doa = d_o.columns(a * dh, dh);
        let va = cache.v.columns(a * dh, dh);
        let qa = cache.q.columns(a * dh, dh);
        let ka = cache.k.columns(a * dh, dh);
        let dp = doa * va.transpose();
        dv.columns_mut(a * dh, dh).copy_from(&(prob.transpose() * doa));
        let mut ds = prob.component_mul(&dp);
        for r in 0..t {
            let dot: f64 = ds.row(r).sum();
            for c in 0..t {
                ds[(r, c)] -= prob[(r, c)] * dot;
            }
        }
        ds *= scale;
        dq.columns_mut(a * dh, dh).copy_from(&(&ds * ka));
        dk.columns_mut(a * dh, dh).copy_from(&(ds.transpose() * qa));
    }
    let ht = cache.h.transpose();
    grad.wq += &ht * &dq;
    grad.wk += &ht * &dk;
    grad.wv += &ht * &dv;
    let dhid = &dq * p.wq.transpose() + &dk * p.wk.transpose() + &dv * p.wv.transpose();
    dx1 + ln_backward(&dhid, &cache.ln1, &p.ln1_gamma, &mut grad.ln1_gamma, &mut grad.ln1_beta)
}
