//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Gradients are only propagated
//! into nodes that transitively depend on a `requires_grad` leaf; frozen
//! weights therefore cost nothing on the way back.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: Vec<usize>,
        // Lower-triangular probabilities, one L×L block per (segment, head).
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward evaluation; graphs share no
/// state and can be built on separate threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a leaf. Its `requires_grad` flag decides whether
    /// [`Graph::backward`] reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `a[m×n] + bias[n]`, the bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let tb = self.value(bias);
        if tb.len() != n {
            return Err(Error::dim("add_row", self.value(a).shape(), tb.shape()));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..m {
            for (o, bv) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(out.with_grad(false), Op::AddRow(a, bias), ng))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Row-wise layer normalisation with affine parameters `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("shape preserved");
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Multi-head causal self-attention over `q`, `k`, `v` (each `N×d`).
    ///
    /// The `N` rows are the concatenation of independent sequences whose
    /// lengths are given by `segments`; attention never crosses a segment
    /// boundary and position `i` sees positions `0..=i` of its own segment.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (n, d) = self.value(q).dims2()?;
        for other in [k, v] {
            if self.value(other).shape() != [n, d] {
                return Err(Error::dim("attention", &[n, d], self.value(other).shape()));
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Contract(format!(
                "{d} features cannot be split into {n_heads} heads"
            )));
        }
        if segments.iter().sum::<usize>() != n {
            return Err(Error::dim("attention segments", &[n], segments));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| l * l).sum::<usize>() * n_heads);
        let mut start = 0;
        for &len in segments {
            for h in 0..n_heads {
                let off = h * dh;
                let block = probs.len();
                probs.resize(block + len * len, 0.0);
                for i in 0..len {
                    let qi = &tq[(start + i) * d + off..(start + i) * d + off + dh];
                    let row = &mut probs[block + i * len..block + i * len + len];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &tk[(start + j) * d + off..(start + j) * d + off + dh];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for p in row[..=i].iter_mut() {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    for p in row[..=i].iter_mut() {
                        *p /= z;
                    }
                    let oi = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for j in 0..=i {
                        let p = row[j];
                        let vj = &tv[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
            start += len;
        }
        let out = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments: segments.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean over rows of `-log softmax(logits[t])[targets[t]]`, max-shifted.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, vsz) = tl.dims2()?;
        if targets.len() != t {
            return Err(Error::dim("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if t == 0 {
            return Err(Error::Contract("cross entropy over zero rows".into()));
        }
        let mut probs = vec![0.0; t * vsz];
        let mut total = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= vsz {
                return Err(Error::Index {
                    index: target,
                    bound: vsz,
                });
            }
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[target];
            for j in 0..vsz {
                probs[i * vsz + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(total / t as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, objective: Var) -> Result<Gradients> {
        let out = self.value(objective);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar objective, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[objective.0] = Some(vec![1.0]);

        for idx in (0..=objective.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(g),
                _ => None,
            })
            .collect();
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && n.needs_grad)
            .map(|(i, n)| (Var(i), n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, leaves })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if ng(*a) {
                    let da = slot(grads, *a, m * k);
                    matmul_nt_into(g, self.value(*b).data(), da, m, n, k);
                }
                if ng(*b) {
                    let db = slot(grads, *b, k * n);
                    matmul_tn_into(self.value(*a).data(), g, db, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if ng(v) {
                        axpy(slot(grads, v, g.len()), 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if ng(*b) {
                    axpy(slot(grads, *b, g.len()), -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    let other = self.value(*b).data();
                    let da = slot(grads, *a, g.len());
                    for ((d, gi), o) in da.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if ng(*b) {
                    let other = self.value(*a).data();
                    let db = slot(grads, *b, g.len());
                    for ((d, gi), o) in db.iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if ng(*a) {
                    axpy(slot(grads, *a, g.len()), *c, g);
                }
            }
            Op::AddRow(a, bias) => {
                if ng(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if ng(*bias) {
                    let n = self.value(*bias).len();
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(db, 1.0, row);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if ng(*table) {
                    let (rows, d) = self.value(*table).dims2()?;
                    let dt = slot(grads, *table, rows * d);
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.value(*x).dims2()?;
                let gam = self.value(*gamma).data();
                if ng(*gamma) {
                    let dg = slot(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if ng(*beta) {
                    let db = slot(grads, *beta, n);
                    for row in g.chunks(n) {
                        axpy(db, 1.0, row);
                    }
                }
                if ng(*x) {
                    let dx = slot(grads, *x, m * n);
                    let nf = n as f64;
                    for i in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[i * n + j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dh = g[i * n + j] * gam[j];
                            dx[i * n + j] += inv_std[i] / nf
                                * (nf * dh - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if ng(*x) {
                    let xs = self.value(*x).data();
                    let dx = slot(grads, *x, g.len());
                    for ((d, gi), &v) in dx.iter_mut().zip(g).zip(xs) {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *n_heads, segments, probs, g, grads)?,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if ng(*logits) {
                    let (t, vsz) = self.value(*logits).dims2()?;
                    let coef = g[0] / t as f64;
                    let dl = slot(grads, *logits, t * vsz);
                    for (i, &target) in targets.iter().enumerate() {
                        for j in 0..vsz {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            dl[i * vsz + j] += coef * (probs[i * vsz + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if ng(*a) {
                    let n = self.value(*a).len();
                    slot(grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        segments: &[usize],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (n, d) = self.value(q).dims2()?;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = Vec::new();
        let mut start = 0;
        let mut block = 0;
        for &len in segments {
            for h in 0..n_heads {
                let off = h * dh;
                for i in 0..len {
                    let p = &probs[block + i * len..block + i * len + len];
                    let gi = &g[(start + i) * d + off..(start + i) * d + off + dh];
                    dp.clear();
                    let mut dot = 0.0;
                    for j in 0..=i {
                        let vj = &tv[(start + j) * d + off..(start + j) * d + off + dh];
                        let x = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        dp.push(x);
                        dot += p[j] * x;
                        let dvj = &mut dv[(start + j) * d + off..(start + j) * d + off + dh];
                        axpy(dvj, p[j], gi);
                    }
                    let qi_range = (start + i) * d + off..(start + i) * d + off + dh;
                    for j in 0..=i {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = (start + j) * d + off..(start + j) * d + off + dh;
                        axpy(&mut dq[qi_range.clone()], ds, &tk[kj.clone()]);
                        axpy(&mut dk[kj], ds, &tq[qi_range.clone()]);
                    }
                }
                block += len * len;
            }
            start += len;
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                axpy(slot(grads, var, n * d), 1.0, &grad);
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Result of [`Graph::backward`]: one gradient per `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: Vec<(Var, Vec<usize>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf. Leaves the objective does not reach
    /// get an explicit zero tensor.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self
            .leaves
            .iter()
            .find(|(l, _)| *l == v)
            .map(|(_, s)| s.clone());
        match (self.grads.get(v.0).and_then(|g| g.as_ref()), shape) {
            (Some(g), Some(shape)) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            (None, Some(shape)) => Tensor::zeros(&shape),
            _ => Tensor::zeros(&[]),
        }
    }

    /// Borrow the raw gradient buffer, `None` when the leaf was unreached.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// All `requires_grad` leaves in registration order, with explicit zeros
    /// for unreached ones.
    pub fn leaves(&self) -> impl Iterator<Item = (Var, Tensor)> + '_ {
        self.leaves.iter().map(|(v, _)| (*v, self.wrt(*v)))
    }
}
