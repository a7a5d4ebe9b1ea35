//! Single-head self-attention encoder block.
//!
//! Per sample `X` (tokens × width):
//!
//! ```text
//! Q = X·Wq   K = X·Wk   V = X·Wv
//! P = softmax_rows(Q·Kᵀ / √attn)
//! Y1 = X + (P·V)·Wo
//! Y  = Y1 + relu(Y1·W1 + b1)·W2 + b2
//! ```
//!
//! No layer normalization.

use rand::Rng;

use super::ops::{col_sum_acc, matmul, matmul_nt, matmul_tn_acc};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub tokens: usize,
    pub width: usize,
    pub attn_width: usize,
    pub mlp_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub dims: EncoderDims,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

/// Intermediates retained by the forward pass, all stored batch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    input: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    attended: Vec<f64>,
    y1: Vec<f64>,
    pre_act: Vec<f64>,
}

impl EncoderBlock {
    pub fn init<R: Rng + ?Sized>(dims: EncoderDims, rng: &mut R) -> Self {
        let EncoderDims {
            width: d,
            attn_width: a,
            mlp_width: h,
            ..
        } = dims;
        let p = |shape: &[usize], std: f64, rng: &mut R| Parameter::new(Tensor::randn(shape, std, rng));
        Self {
            dims,
            wq: p(&[d, a], (1.0 / d as f64).sqrt(), rng),
            wk: p(&[d, a], (1.0 / d as f64).sqrt(), rng),
            wv: p(&[d, a], (1.0 / d as f64).sqrt(), rng),
            wo: p(&[a, d], (1.0 / a as f64).sqrt(), rng),
            w1: p(&[d, h], (2.0 / d as f64).sqrt(), rng),
            b1: Parameter::new(Tensor::zeros(&[h])),
            w2: p(&[h, d], (1.0 / h as f64).sqrt(), rng),
            b2: Parameter::new(Tensor::zeros(&[d])),
        }
    }

    /// All-zero weights: the block is the identity map through its residuals.
    pub fn zeros(dims: EncoderDims) -> Self {
        let EncoderDims {
            width: d,
            attn_width: a,
            mlp_width: h,
            ..
        } = dims;
        let z = |shape: &[usize]| Parameter::new(Tensor::zeros(shape));
        Self {
            dims,
            wq: z(&[d, a]),
            wk: z(&[d, a]),
            wv: z(&[d, a]),
            wo: z(&[a, d]),
            w1: z(&[d, h]),
            b1: z(&[h]),
            w2: z(&[h, d]),
            b2: z(&[d]),
        }
    }

    pub fn params(&self) -> [&Parameter; 8] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 8] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn batch_of(&self, shape: &[usize]) -> Result<usize> {
        let EncoderDims { tokens, width, .. } = self.dims;
        match shape {
            [b, t, w] if *t == tokens && *w == width => Ok(*b),
            _ => Err(Error::Shape {
                layer: "encoder-block",
                expected: format!("[batch, {tokens}, {width}]"),
                got: shape.to_vec(),
            }),
        }
    }

    pub(crate) fn forward(&self, input: &Tensor) -> Result<(Tensor, EncoderCache)> {
        let batch = self.batch_of(input.shape())?;
        let EncoderDims {
            tokens: t,
            width: d,
            attn_width: a,
            mlp_width: h,
        } = self.dims;
        let scale = 1.0 / (a as f64).sqrt();
        let rows = batch * t;
        let x = input.data();

        // Projections are per token, so they can run over all rows at once.
        let q = matmul(x, self.wq.value.data(), rows, d, a);
        let k = matmul(x, self.wk.value.data(), rows, d, a);
        let v = matmul(x, self.wv.value.data(), rows, d, a);

        let mut probs = vec![0.0; batch * t * t];
        let mut attended = vec![0.0; rows * a];
        for s in 0..batch {
            let qs = &q[s * t * a..(s + 1) * t * a];
            let ks = &k[s * t * a..(s + 1) * t * a];
            let vs = &v[s * t * a..(s + 1) * t * a];
            let mut scores = matmul_nt(qs, ks, t, a, t);
            for row in scores.chunks_mut(t) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - max).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            let o = matmul(&scores, vs, t, t, a);
            probs[s * t * t..(s + 1) * t * t].copy_from_slice(&scores);
            attended[s * t * a..(s + 1) * t * a].copy_from_slice(&o);
        }

        let mut y1 = matmul(&attended, self.wo.value.data(), rows, a, d);
        for (y, xv) in y1.iter_mut().zip(x) {
            *y += xv;
        }
        let mut pre_act = matmul(&y1, self.w1.value.data(), rows, d, h);
        for row in pre_act.chunks_mut(h) {
            for (z, b) in row.iter_mut().zip(self.b1.value.data()) {
                *z += b;
            }
        }
        let act: Vec<f64> = pre_act.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
        let mut out = matmul(&act, self.w2.value.data(), rows, h, d);
        for (row, y1row) in out.chunks_mut(d).zip(y1.chunks(d)) {
            for ((o, b), y) in row.iter_mut().zip(self.b2.value.data()).zip(y1row) {
                *o += b + y;
            }
        }

        let cache = EncoderCache {
            input: input.clone(),
            q,
            k,
            v,
            probs,
            attended,
            y1,
            pre_act,
        };
        Ok((Tensor::new(input.shape().to_vec(), out)?, cache))
    }

    pub(crate) fn backward(&mut self, cache: &EncoderCache, upstream: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(cache.input.shape())?;
        if upstream.shape() != cache.input.shape() {
            return Err(Error::Shape {
                layer: "encoder-block (upstream gradient)",
                expected: format!("{:?}", cache.input.shape()),
                got: upstream.shape().to_vec(),
            });
        }
        let EncoderDims {
            tokens: t,
            width: d,
            attn_width: a,
            mlp_width: h,
        } = self.dims;
        let scale = 1.0 / (a as f64).sqrt();
        let rows = batch * t;
        let dy = upstream.data();

        // MLP branch.
        let act: Vec<f64> = cache.pre_act.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
        matmul_tn_acc(&act, dy, rows, h, d, self.w2.grad.data_mut());
        col_sum_acc(dy, rows, d, self.b2.grad.data_mut());
        let mut dz = matmul_nt(dy, self.w2.value.data(), rows, d, h);
        for (g, &z) in dz.iter_mut().zip(&cache.pre_act) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        matmul_tn_acc(&cache.y1, &dz, rows, d, h, self.w1.grad.data_mut());
        col_sum_acc(&dz, rows, h, self.b1.grad.data_mut());
        let mut dy1 = matmul_nt(&dz, self.w1.value.data(), rows, h, d);
        for (g, u) in dy1.iter_mut().zip(dy) {
            *g += u;
        }

        // Attention branch.
        matmul_tn_acc(&cache.attended, &dy1, rows, a, d, self.wo.grad.data_mut());
        let d_att = matmul_nt(&dy1, self.wo.value.data(), rows, d, a);
        let mut dq = vec![0.0; rows * a];
        let mut dk = vec![0.0; rows * a];
        let mut dv = vec![0.0; rows * a];
        for s in 0..batch {
            let span = s * t * a..(s + 1) * t * a;
            let p = &cache.probs[s * t * t..(s + 1) * t * t];
            let dos = &d_att[span.clone()];
            let qs = &cache.q[span.clone()];
            let ks = &cache.k[span.clone()];
            let vs = &cache.v[span.clone()];

            let dp = matmul_nt(dos, vs, t, a, t);
            matmul_tn_acc(p, dos, t, t, a, &mut dv[span.clone()]);
            let mut ds = vec![0.0; t * t];
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let dprow = &dp[i * t..(i + 1) * t];
                let inner: f64 = prow.iter().zip(dprow).map(|(x, y)| x * y).sum();
                for j in 0..t {
                    ds[i * t + j] = prow[j] * (dprow[j] - inner) * scale;
                }
            }
            let dqs = matmul(&ds, ks, t, t, a);
            dq[span.clone()].copy_from_slice(&dqs);
            matmul_tn_acc(&ds, qs, t, t, a, &mut dk[span]);
        }

        let x = cache.input.data();
        matmul_tn_acc(x, &dq, rows, d, a, self.wq.grad.data_mut());
        matmul_tn_acc(x, &dk, rows, d, a, self.wk.grad.data_mut());
        matmul_tn_acc(x, &dv, rows, d, a, self.wv.grad.data_mut());
        let mut dx = dy1;
        for (grad, w) in [(&dq, &self.wq), (&dk, &self.wk), (&dv, &self.wv)] {
            let part = matmul_nt(grad, w.value.data(), rows, a, d);
            for (g, p) in dx.iter_mut().zip(part) {
                *g += p;
            }
        }
        Tensor::new(cache.input.shape().to_vec(), dx)
    }
}
