//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. Each recorded
//! node owns its forward value plus whatever intermediates its backward rule
//! needs. [`Graph::backward`] walks the tape in exact reverse order, fills
//! gradients for every `requires_grad` leaf and then drops the tape; a second
//! call without building a new graph is an error.

use crate::error::{arg_err, dim_err, Error, Result};
use crate::kernels::{self, Exec};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Cross-entropy target marking a row that does not contribute to the loss.
pub const IGNORE_TARGET: usize = usize::MAX;

/// Epsilon inside the RMSNorm square root.
pub const RMSNORM_EPS: f32 = 1e-6;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape bookkeeping for the fused causal attention op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, rows: usize, inp: usize, out: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape(Var),
    Sigmoid(Var),
    Silu(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    SoftmaxRows { x: Var, cols: usize },
    RmsNorm { x: Var, w: Var, inv: Vec<f32> },
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    GroupScale { x: Var, f: Var, group: usize },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<f32> },
    Rope { x: Var, shape: AttnShape, base: f32 },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32>, counted: usize },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording tape plus node storage.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
    exec: Exec,
    visit_order: Vec<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn map_chunks<T, F>(exec: Exec, count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && count > 1 {
        return (0..count).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..count).map(f).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            exec,
            visit_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of a `requires_grad` node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn backward_visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).as_matrix();
        if self.value(row).numel() != n {
            return Err(dim_err!("add_row: row of {} for {n} columns", self.value(row).numel()));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, rg, Op::AddRow(a, row)))
    }

    /// `a[m×n] * row[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).as_matrix();
        if self.value(row).numel() != n {
            return Err(dim_err!("mul_row: row of {} for {n} columns", self.value(row).numel()));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x *= y;
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, rg, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * sigmoid_scalar(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, rg, Op::Silu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Result<Var> {
        if !(lo <= hi) {
            return Err(arg_err!("clamp: lo {lo} > hi {hi}"));
        }
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Clamp { x: a, lo, hi }))
    }

    /// `y_i = x_i · f[i / group]` over the flattened input.
    pub fn group_scale(&mut self, x: Var, f: Var, group: usize) -> Result<Var> {
        let (tx, tf) = (self.value(x), self.value(f));
        if group == 0 || tx.numel() != tf.numel() * group {
            return Err(dim_err!(
                "group_scale: {} values, {} factors, group {group}",
                tx.numel(),
                tf.numel()
            ));
        }
        let fd = tf.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * fd[i / group])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(f);
        Ok(self.push(t, rg, Op::GroupScale { x, f, group }))
    }

    /// Records an externally computed forward value whose gradient is the
    /// identity with respect to `x`.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        same_shape(self.value(x), &value, "straight_through")?;
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::StraightThrough(x)))
    }

    // ── shape ────────────────────────────────────────────────────────────

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(dim_err!("transpose expects 2-D, got {:?}", ta.shape()));
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let t = Tensor::new([cols, rows], kernels::transpose(ta.data(), rows, cols))?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Transpose { a, rows, cols }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, rg, Op::Reshape(a)))
    }

    // ── linear algebra ───────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err!("matmul: {:?} × {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = kernels::matmul(self.exec, ta.data(), tb.data(), m, k, n);
        let t = Tensor::new([m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::MatMul { a, b, m, k, n }))
    }

    /// `x[rows×in] · w[out×in]ᵀ`, the layout of a linear layer weight.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (rows, inp) = tx.as_matrix();
        if tw.shape().len() != 2 || tw.shape()[1] != inp {
            return Err(dim_err!("linear: input {:?}, weight {:?}", tx.shape(), tw.shape()));
        }
        let out = tw.shape()[0];
        let data = kernels::matmul_nt(self.exec, tx.data(), tw.data(), rows, inp, out);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, rg, Op::Linear { x, w, rows, inp, out }))
    }

    // ── normalization / activation ───────────────────────────────────────

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (_, cols) = tx.as_matrix();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::SoftmaxRows { x, cols })
    }

    /// `x / sqrt(mean(x²) + ε) · w` per row.
    pub fn rmsnorm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, n) = tx.as_matrix();
        if tw.numel() != n {
            return Err(dim_err!("rmsnorm: weight of {} for {n} features", tw.numel()));
        }
        let mut inv = vec![0.0f32; m];
        let mut data = vec![0.0f32; m * n];
        let (xd, wd) = (tx.data(), tw.data());
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f32>() / n as f32;
            let r = 1.0 / (ms + RMSNORM_EPS).sqrt();
            inv[i] = r;
            for j in 0..n {
                data[i * n + j] = row[j] * r * wd[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, rg, Op::RmsNorm { x, w, inv }))
    }

    // ── reductions ───────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f32>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.data().iter().sum::<f32>() / ta.numel().max(1) as f32;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() as f32;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumSq(a))
    }

    // ── transformer pieces ───────────────────────────────────────────────

    /// Row gather from an embedding table `[vocab × d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = tt.as_matrix();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(arg_err!("gather: id {id} outside table of {vocab} rows"));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let t = Tensor::new([ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(t, rg, Op::Gather { table, ids: ids.to_vec() }))
    }

    /// Rotary position embedding applied per head; positions are `row % seq`.
    pub fn rope(&mut self, x: Var, shape: AttnShape) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = tx.as_matrix();
        check_attn_shape(rows, d, shape)?;
        let dh = d / shape.heads;
        if !dh.is_multiple_of(2) {
            return Err(dim_err!("rope needs an even head dimension, got {dh}"));
        }
        let base = 10000.0;
        let data = rope_apply(tx.data(), rows, d, shape, base, false);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Rope { x, shape, base }))
    }

    /// Fused causal multi-head self-attention on `[batch·seq × d]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape(tq, tk, "attention q/k")?;
        same_shape(tq, tv, "attention q/v")?;
        let (rows, d) = tq.as_matrix();
        check_attn_shape(rows, d, shape)?;
        let AttnShape { batch, seq, heads } = shape;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());

        let per_batch: Vec<(Vec<f32>, Vec<f32>)> = map_chunks(self.exec, batch, |b| {
            let mut out = vec![0.0f32; seq * d];
            let mut probs = vec![0.0f32; heads * seq * seq];
            let base = b * seq;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    let p = &mut probs[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                        p[j] = kernels::dot(qi, kj) * scale;
                        max = max.max(p[j]);
                    }
                    let mut sum = 0.0;
                    for pj in p[..=i].iter_mut() {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..=i {
                        p[j] /= sum;
                        let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                        kernels::axpy(p[j], vj, o);
                    }
                }
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::with_capacity(batch * heads * seq * seq);
        for (o, p) in per_batch {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let t = Tensor::new(tq.shape().to_vec(), out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(t, rg, Op::Attention { q, k, v, shape, probs }))
    }

    /// Mean token-level cross-entropy of `logits[n×vocab]` against `targets`.
    /// Rows whose target is [`IGNORE_TARGET`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, vocab) = tl.as_matrix();
        if targets.len() != n {
            return Err(dim_err!("cross_entropy: {} targets for {n} rows", targets.len()));
        }
        let mut probs = tl.data().to_vec();
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let t = targets[i];
            if t == IGNORE_TARGET {
                row.fill(0.0);
                continue;
            }
            if t >= vocab {
                return Err(arg_err!("cross_entropy: target {t} outside vocab {vocab}"));
            }
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            total += (sum.ln() - (tl.data()[i * vocab + t] - max)) as f64;
            counted += 1;
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let loss = (total / counted.max(1) as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, counted },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    fn acc(&mut self, v: Var, g: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        g(slot);
    }

    fn acc_vec(&mut self, v: Var, delta: &[f32]) {
        self.acc(v, |slot| {
            for (s, d) in slot.iter_mut().zip(delta) {
                *s += d;
            }
        });
    }

    /// Populates gradients of every `requires_grad` leaf from a scalar loss
    /// and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(arg_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        self.visit_order.clear();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.visit_order.push(i);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g)?;
            if matches!(op, Op::Leaf) {
                self.grads[i] = Some(g);
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            node.op = Op::Leaf;
            if node.requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, g: &[f32]) -> Result<()> {
        let exec = self.exec;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_vec(a, g);
                self.acc_vec(b, g);
            }
            Op::Sub(a, b) => {
                self.acc_vec(a, g);
                self.acc(b, |s| {
                    for (s, d) in s.iter_mut().zip(g) {
                        *s -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv: Vec<f32> =
                        self.value(b).data().iter().zip(g).map(|(x, y)| x * y).collect();
                    self.acc_vec(a, &bv);
                }
                if self.rg(b) {
                    let av: Vec<f32> =
                        self.value(a).data().iter().zip(g).map(|(x, y)| x * y).collect();
                    self.acc_vec(b, &av);
                }
            }
            Op::AddRow(a, row) => {
                self.acc_vec(a, g);
                if self.rg(row) {
                    let n = self.value(row).numel();
                    let mut dr = vec![0.0f32; n];
                    for chunk in g.chunks(n) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    self.acc_vec(row, &dr);
                }
            }
            Op::MulRow(a, row) => {
                let n = self.value(row).numel();
                if self.rg(a) {
                    let r = self.value(row).data();
                    let da: Vec<f32> =
                        g.iter().enumerate().map(|(j, x)| x * r[j % n]).collect();
                    self.acc_vec(a, &da);
                }
                if self.rg(row) {
                    let av = self.value(a).data();
                    let mut dr = vec![0.0f32; n];
                    for (j, (x, y)) in g.iter().zip(av).enumerate() {
                        dr[j % n] += x * y;
                    }
                    self.acc_vec(row, &dr);
                }
            }
            Op::Scale(a, c) => {
                self.acc(a, |s| {
                    for (s, d) in s.iter_mut().zip(g) {
                        *s += c * d;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) | Op::StraightThrough(a) => self.acc_vec(a, g),
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    // dA = dC · Bᵀ
                    let da = kernels::matmul_nt(exec, g, self.value(b).data(), m, n, k);
                    self.acc_vec(a, &da);
                }
                if self.rg(b) {
                    // dB = Aᵀ · dC
                    let db = kernels::matmul_tn(exec, self.value(a).data(), g, m, k, n);
                    self.acc_vec(b, &db);
                }
            }
            Op::Linear { x, w, rows, inp, out } => {
                if self.rg(x) {
                    let dx = kernels::matmul(exec, g, self.value(w).data(), rows, out, inp);
                    self.acc_vec(x, &dx);
                }
                if self.rg(w) {
                    let dw = kernels::matmul_tn(exec, g, self.value(x).data(), rows, out, inp);
                    self.acc_vec(w, &dw);
                }
            }
            Op::Transpose { a, rows, cols } => {
                let da = kernels::transpose(g, cols, rows);
                self.acc_vec(a, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let da: Vec<f32> = y.iter().zip(g).map(|(y, d)| d * y * (1.0 - y)).collect();
                self.acc_vec(a, &da);
            }
            Op::Silu(a) => {
                let x = self.value(a).data();
                let da: Vec<f32> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, d)| {
                        let s = sigmoid_scalar(x);
                        d * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.acc_vec(a, &da);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data();
                let dx: Vec<f32> = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v >= lo && v <= hi { d } else { 0.0 })
                    .collect();
                self.acc_vec(x, &dx);
            }
            Op::SoftmaxRows { x, cols } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0f32; y.len()];
                for ((yr, gr), dr) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let dotp: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.acc_vec(x, &dx);
            }
            Op::RmsNorm { x, w, ref inv } => {
                let (m, n) = self.value(x).as_matrix();
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let dx = self.rg(x).then(|| {
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        let xr = &xv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let inv_r = inv[r];
                        let mut proj = 0.0f32;
                        for j in 0..n {
                            proj += gr[j] * wv[j] * xr[j] * inv_r;
                        }
                        proj /= n as f32;
                        for j in 0..n {
                            let xh = xr[j] * inv_r;
                            dx[r * n + j] = inv_r * (gr[j] * wv[j] - xh * proj);
                        }
                    }
                    dx
                });
                let dw = self.rg(w).then(|| {
                    let mut dw = vec![0.0f32; n];
                    for r in 0..m {
                        for j in 0..n {
                            dw[j] += g[r * n + j] * xv[r * n + j] * inv[r];
                        }
                    }
                    dw
                });
                if let Some(dx) = dx {
                    self.acc_vec(x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc_vec(w, &dw);
                }
            }
            Op::Sum(a) => {
                let c = g[0];
                self.acc(a, |s| s.iter_mut().for_each(|v| *v += c));
            }
            Op::Mean(a) => {
                let c = g[0] / self.value(a).numel().max(1) as f32;
                self.acc(a, |s| s.iter_mut().for_each(|v| *v += c));
            }
            Op::SumSq(a) => {
                let c = 2.0 * g[0];
                let da: Vec<f32> = self.value(a).data().iter().map(|v| c * v).collect();
                self.acc_vec(a, &da);
            }
            Op::GroupScale { x, f, group } => {
                if self.rg(x) {
                    let fv = self.value(f).data();
                    let dx: Vec<f32> =
                        g.iter().enumerate().map(|(j, d)| d * fv[j / group]).collect();
                    self.acc_vec(x, &dx);
                }
                if self.rg(f) {
                    let xv = self.value(x).data();
                    let df: Vec<f32> = xv
                        .chunks(group)
                        .zip(g.chunks(group))
                        .map(|(xc, gc)| xc.iter().zip(gc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc_vec(f, &df);
                }
            }
            Op::Gather { table, ref ids } => {
                let (_, d) = self.value(table).as_matrix();
                self.acc(table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut s[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::Rope { x, shape, base } => {
                let (rows, d) = self.value(x).as_matrix();
                let dx = rope_apply(g, rows, d, shape, base, true);
                self.acc_vec(x, &dx);
            }
            Op::Attention { q, k, v, shape, ref probs } => {
                let (dq, dk, dv) = self.attention_backward(q, k, v, shape, probs, g);
                self.acc_vec(q, &dq);
                self.acc_vec(k, &dk);
                self.acc_vec(v, &dv);
            }
            Op::CrossEntropy { logits, ref targets, ref probs, counted } => {
                let (_, vocab) = self.value(logits).as_matrix();
                let c = g[0] / counted.max(1) as f32;
                let mut dl: Vec<f32> = probs.iter().map(|p| p * c).collect();
                for (r, &t) in targets.iter().enumerate() {
                    if t != IGNORE_TARGET {
                        dl[r * vocab + t] -= c;
                    }
                }
                self.acc_vec(logits, &dl);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[f32],
        g: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let AttnShape { batch, seq, heads } = shape;
        let (_, d) = self.value(q).as_matrix();
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let parts = map_chunks(self.exec, batch, |b| {
            let mut dq = vec![0.0f32; seq * d];
            let mut dk = vec![0.0f32; seq * d];
            let mut dv = vec![0.0f32; seq * d];
            let mut dp = vec![0.0f32; seq];
            let base = b * seq;
            let pb = &probs[b * heads * seq * seq..(b + 1) * heads * seq * seq];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &pb[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                    let gi = &g[(base + i) * d + off..(base + i) * d + off + dh];
                    let mut pdp = 0.0f32;
                    for j in 0..=i {
                        let vj = &vd[(base + j) * d + off..(base + j) * d + off + dh];
                        dp[j] = kernels::dot(gi, vj);
                        pdp += p[j] * dp[j];
                        kernels::axpy(p[j], gi, &mut dv[j * d + off..j * d + off + dh]);
                    }
                    let qi = &qd[(base + i) * d + off..(base + i) * d + off + dh];
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(base + j) * d + off..(base + j) * d + off + dh];
                        kernels::axpy(ds, kj, &mut dq[i * d + off..i * d + off + dh]);
                        kernels::axpy(ds, qi, &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
            (dq, dk, dv)
        });
        let n = batch * seq * d;
        let (mut dq, mut dk, mut dv) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for (a, b, c) in parts {
            dq.extend_from_slice(&a);
            dk.extend_from_slice(&b);
            dv.extend_from_slice(&c);
        }
        (dq, dk, dv)
    }
}

fn check_attn_shape(rows: usize, d: usize, shape: AttnShape) -> Result<()> {
    if shape.heads == 0 || !d.is_multiple_of(shape.heads) {
        return Err(dim_err!("{d} features not divisible into {} heads", shape.heads));
    }
    if shape.batch * shape.seq != rows {
        return Err(dim_err!(
            "{rows} rows do not match batch {} × seq {}",
            shape.batch,
            shape.seq
        ));
    }
    Ok(())
}

fn rope_apply(x: &[f32], rows: usize, d: usize, shape: AttnShape, base: f32, inverse: bool) -> Vec<f32> {
    let dh = d / shape.heads;
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let pos = (r % shape.seq) as f32;
        for h in 0..shape.heads {
            for p in 0..dh / 2 {
                let theta = pos * base.powf(-2.0 * p as f32 / dh as f32);
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let i0 = r * d + h * dh + 2 * p;
                let (a, b) = (x[i0], x[i0 + 1]);
                out[i0] = a * cos - b * sin;
                out[i0 + 1] = a * sin + b * cos;
            }
        }
    }
    out
}

/// Scalar logistic function, stable for large |x| and exact at ±∞.
pub fn sigmoid(x: f32) -> f32 {
    sigmoid_scalar(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t2(&[&[1.0, 2.0]]));
        let col = g.constant(t2(&[&[3.0], &[4.0]]));
        let p = g.matmul(r, col).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(g.matmul(r, r).is_err());
    }

    #[test]
    fn matmul_sum_gradient_wrt_a() {
        let mut g = Graph::new();
        let a = g.param(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t2(&[&[1.0, 1.0], &[1.0, 1.0]]));
        let c = g.matmul(a, b).unwrap();
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn sigmoid_values_and_saturation() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, f32::INFINITY, f32::NEG_INFINITY, 2.197_224_6]));
        let y = g.sigmoid(x);
        let out = g.value(y).data().to_vec();
        assert_eq!(out[0], 0.5);
        assert_eq!(out[1], 1.0);
        assert_eq!(out[2], 0.0);
        assert!((out[3] - 0.9).abs() < 1e-6);
        let l = g.sum(y);
        g.backward(l).unwrap();
        let gr = g.grad(x).unwrap();
        assert_eq!(gr[1], 0.0);
        assert_eq!(gr[2], 0.0);
        assert_eq!(gr[0], 0.25);
    }

    #[test]
    fn clamp_values_and_subgradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![5.0, 1.5, -0.2, 3.0, 0.0]));
        let y = g.clamp(x, 0.0, 3.0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 1.5, 0.0, 3.0, 0.0]);
        let l = g.sum(y);
        g.backward(l).unwrap();
        // Exact boundary counts as inside.
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        assert!(matches!(g.clamp(x, 2.0, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_silu_rmsnorm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[0.0, 0.0]]));
        let s = g.softmax_rows(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let z = g.constant(Tensor::scalar(0.0));
        let y = g.silu(z);
        assert_eq!(g.value(y).item(), 0.0);

        let x = g.constant(t2(&[&[3.0, 4.0]]));
        let w = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let r = g.rmsnorm(x, w).unwrap();
        let v = g.value(r).data();
        assert!((v[0] - 0.848_528).abs() < 1e-5);
        assert!((v[1] - 1.131_371).abs() < 1e-5);
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new([2, 3], vec![0.3; 6]).unwrap());
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let c = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let x = g.param(c.clone());
        let cc = g.constant(c);
        let d = g.sub(x, cc).unwrap();
        let l = g.sum_sq(d);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Argument(_))));
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order_and_zeroes_unused_leaves() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![7.0]));
        let a = g.sigmoid(x);
        let b = g.scale(a, 3.0);
        let l = g.sum(b);
        g.backward(l).unwrap();
        assert_eq!(
            g.backward_visit_order(),
            &[l.index(), b.index(), a.index(), x.index()]
        );
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn attention_single_token_passes_values_through() {
        let mut g = Graph::new();
        let q = g.constant(t2(&[&[0.3, -1.0]]));
        let k = g.constant(t2(&[&[2.0, 0.5]]));
        let v = g.constant(t2(&[&[4.0, -3.0]]));
        let o = g
            .causal_attention(q, k, v, AttnShape { batch: 1, seq: 1, heads: 1 })
            .unwrap();
        assert_eq!(g.value(o).data(), &[4.0, -3.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros([3, 8]));
        let ce = g.cross_entropy(l, &[0, 5, 7]).unwrap();
        assert!((g.value(ce).item() - 8f32.ln()).abs() < 1e-6);
        assert!(g.cross_entropy(l, &[0, 9, 1]).is_err());
    }
}
