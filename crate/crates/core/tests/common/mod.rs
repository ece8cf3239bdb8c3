//! Independent double-precision reference implementations used as test
//! oracles. Nothing here calls into the engine under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            z * std
        })
        .collect()
}

pub fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// `x[rows×inp] · w[out×inp]ᵀ`
pub fn linear(x: &[f64], w: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            y[r * out + o] = (0..inp).map(|i| x[r * inp + i] * w[o * inp + i]).sum();
        }
    }
    y
}

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            y[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    y
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

pub fn rmsnorm(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + EPS).sqrt();
            row.iter().zip(w).map(move |(v, g)| v * r * g)
        })
        .collect()
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    x.chunks(cols)
        .flat_map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Rotary embedding on `[batch·seq × d]`, pairs `(2p, 2p+1)` within each head.
pub fn rope(x: &[f64], d: usize, seq: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut y = x.to_vec();
    for (r, row) in y.chunks_mut(d).enumerate() {
        let pos = (r % seq) as f64;
        for h in 0..heads {
            for p in 0..dh / 2 {
                let ang = pos * 10000f64.powf(-2.0 * p as f64 / dh as f64);
                let i = h * dh + 2 * p;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * ang.cos() - b * ang.sin();
                row[i + 1] = a * ang.sin() + b * ang.cos();
            }
        }
    }
    y
}

/// Causal multi-head attention with `1/√d_h` scaling.
pub fn causal_attention(q: &[f64], k: &[f64], v: &[f64], batch: usize, seq: usize, heads: usize, d: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; batch * seq * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let qi = (b * seq + i) * d + h * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let kj = (b * seq + j) * d + h * dh;
                        (0..dh).map(|t| q[qi + t] * k[kj + t]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let p = softmax_rows(&scores, scores.len());
                for (j, pj) in p.iter().enumerate() {
                    let vj = (b * seq + j) * d + h * dh;
                    for t in 0..dh {
                        out[qi + t] += pj * v[vj + t];
                    }
                }
            }
        }
    }
    out
}

/// Mean negative log-likelihood; `None` targets are skipped.
pub fn cross_entropy(logits: &[f64], targets: &[Option<usize>], vocab: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (row, t) in logits.chunks(vocab).zip(targets) {
        if let Some(t) = *t {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
            n += 1;
        }
    }
    total / n.max(1) as f64
}

/// Soft quantizer `2σ(v)·s·(clamp(fz + σ(ν), 0, qmax) − z)` where `fz` is
/// `⌊θ/s⌋ + z` per element and `s`, `z`, `v` are per group.
pub struct SoftLayer {
    pub fz: Vec<f64>,
    pub scales: Vec<f64>,
    pub zeros: Vec<f64>,
    pub group: usize,
    pub qmax: f64,
}

impl SoftLayer {
    /// Min/max affine parameters with half-away rounding of the zero point.
    pub fn from_weights(theta: &[f64], group: usize, bits: u32) -> Self {
        let qmax = ((1u32 << bits) - 1) as f64;
        let (mut scales, mut zeros, mut fz) = (Vec::new(), Vec::new(), Vec::new());
        for g in theta.chunks(group) {
            let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s = (hi - lo) / qmax;
            let z = (-(lo / s)).round().clamp(0.0, qmax);
            for &w in g {
                fz.push((w / s).floor() + z);
            }
            scales.push(s);
            zeros.push(z);
        }
        Self { fz, scales, zeros, group, qmax }
    }

    pub fn forward(&self, nu: &[f64], v: Option<&[f64]>) -> Vec<f64> {
        (0..self.fz.len())
            .map(|i| {
                let g = i / self.group;
                let c = (self.fz[i] + sigmoid(nu[i])).clamp(0.0, self.qmax);
                let f = v.map_or(1.0, |v| 2.0 * sigmoid(v[g]));
                f * self.scales[g] * (c - self.zeros[g])
            })
            .collect()
    }
}

/// Shape of a small decoder block for oracle use.
#[derive(Clone, Copy)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub mlp: usize,
    pub batch: usize,
    pub seq: usize,
    pub rope: bool,
}

impl BlockDims {
    /// `(out, in)` of q, k, v, o, gate, up, down.
    pub fn shapes(&self) -> [(usize, usize); 7] {
        let (d, m) = (self.d, self.mlp);
        [(d, d), (d, d), (d, d), (d, d), (m, d), (m, d), (d, m)]
    }
}

/// Pre-norm block: attention then SwiGLU MLP, each with a residual.
pub fn block(dims: BlockDims, attn_norm: &[f64], mlp_norm: &[f64], w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let BlockDims { d, heads, mlp, batch, seq, rope: use_rope } = dims;
    let rows = batch * seq;
    let h = rmsnorm(x, attn_norm, d);
    let mut q = linear(&h, &w[0], rows, d, d);
    let mut k = linear(&h, &w[1], rows, d, d);
    let v = linear(&h, &w[2], rows, d, d);
    if use_rope {
        q = rope(&q, d, seq, heads);
        k = rope(&k, d, seq, heads);
    }
    let a = causal_attention(&q, &k, &v, batch, seq, heads, d);
    let o = linear(&a, &w[3], rows, d, d);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let h2 = rmsnorm(&x1, mlp_norm, d);
    let gate = linear(&h2, &w[4], rows, d, mlp);
    let up = linear(&h2, &w[5], rows, d, mlp);
    let m: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    let down = linear(&m, &w[6], rows, mlp, d);
    x1.iter().zip(&down).map(|(a, b)| a + b).collect()
}

/// `Σ (ŷ − y)² / samples`
pub fn recon_loss(y_hat: &[f64], y: &[f64], samples: usize) -> f64 {
    y_hat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / samples as f64
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let dn = f(&p);
            p[i] = orig;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, 1e-12)`
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Weighted sum `Σ yᵢ rᵢ`, used to reduce tensor outputs to a scalar loss.
pub fn project(y: &[f64], r: &[f64]) -> f64 {
    y.iter().zip(r).map(|(a, b)| a * b).sum()
}
