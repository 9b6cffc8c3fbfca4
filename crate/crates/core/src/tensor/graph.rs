//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns the gradient of every node that depends on a parameter or on an
//! input explicitly marked as differentiable.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm_into, AttentionMask, Real, Tensor};
use crate::error::Result;

/// Index of a parameter inside a [`crate::nn::ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, T),
    MulConst { x: Var, factor: Vec<T> },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gather { table: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        gamma: T,
        probs: Vec<T>,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
        scale: T,
    },
    Sum(Var),
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. Parameters are borrowed, never copied.
pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            dropout_rng: None,
        }
    }

    /// A tape on which [`Graph::dropout`] is active, driven by `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            nodes: Vec::with_capacity(512),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Cow::Owned(value), op, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn input_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Input whose gradient is tracked (for sensitivity tests).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, t: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = self.rc(a);
        let (br, bc) = self.rc(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            out.data_mut(),
            T::zero(),
        );
        self.push_owned(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_owned(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 x n` (or length-`n`) row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (r, c) = self.rc(x);
        assert_eq!(self.value(bias).len(), c, "bias length");
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for i in 0..r {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        self.push_owned(out, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_owned(out, Op::Scale(x, s), &[x])
    }

    /// Inverted dropout. Identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let factor: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &f) in out.data_mut().iter_mut().zip(&factor) {
            *o = *o * f;
        }
        self.push_owned(out, Op::MulConst { x, factor }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        self.push_owned(out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.rc(x);
        let n = T::from_usize(c).unwrap();
        let eps = T::from_f64_lossy(LN_EPS);
        let xs = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = xs.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push_owned(out, op, &[x, gamma, beta])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let mask = AttentionMask::all(r, c);
        self.masked_softmax(x, &mask)
            .expect("unmasked softmax cannot have empty rows")
    }

    /// Row-wise softmax restricted to allowed keys. Masked outputs are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttentionMask) -> Result<Var> {
        let (r, c) = self.rc(x);
        if mask.queries() != r || mask.keys() != c {
            return Err(crate::error::Error::Shape(format!(
                "mask {}x{} vs scores {}x{}",
                mask.queries(),
                mask.keys(),
                r,
                c
            )));
        }
        mask.check_rows()?;
        let out = softmax_rows(self.value(x), mask);
        Ok(self.push_owned(out, Op::Softmax(x), &[x]))
    }

    /// Row gather: `out[i] = table[idx[i]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let (r, c) = self.rc(table);
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {i} out of {r} rows");
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data).unwrap();
        self.push_owned(
            out,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.rc(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows width");
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data).unwrap();
        self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.rc(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.rc(p).1).sum();
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), r, "concat_cols height");
            let c = t.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.rc(x);
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data).unwrap();
        self.push_owned(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.rc(x);
        assert!(start + len <= c, "slice_cols out of range");
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data).unwrap();
        self.push_owned(out, Op::SliceCols { x, start }, &[x])
    }

    /// `sum_i w_i * (1 - p_i)^gamma * (-ln p_i)` where `p_i` is the softmax
    /// probability of `targets[i]` in row `i`. `gamma = 0` is weighted
    /// cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T], gamma: T) -> Var {
        let (r, c) = self.rc(logits);
        assert_eq!(targets.len(), r);
        assert_eq!(weights.len(), r);
        let z = self.value(logits);
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for i in 0..r {
            let row = z.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let se: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            let y = targets[i];
            assert!(y < c, "target {y} out of {c} classes");
            let logp = row[y] - lse;
            let focus = if gamma == T::zero() {
                T::one()
            } else {
                (T::one() - logp.exp()).max(T::zero()).powf(gamma)
            };
            total = total + weights[i] * focus * (-logp);
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            gamma,
            probs,
        };
        self.push_owned(Tensor::scalar(total), op, &[logits])
    }

    /// `scale * sum` of element-wise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T], scale: T) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len());
        let mut total = T::zero();
        for (&zv, &y) in z.data().iter().zip(targets) {
            let l = zv.max(T::zero()) - zv * y + (T::one() + (-zv.abs()).exp()).ln();
            total = total + l;
        }
        let op = Op::Bce {
            logits,
            targets: targets.to_vec(),
            scale,
        };
        self.push_owned(Tensor::scalar(total * scale), op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let mut params = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = n.op {
                params.push((id, i));
            }
        }
        Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params,
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<'p, T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (m, n) = (node.value.rows(), node.value.cols());
                let av = self.value(a);
                let bv = self.value(b);
                let k = if ta { av.rows() } else { av.cols() };
                if self.wants(a) {
                    // dA (in stored layout)
                    let g = grad_slot(grads, a, av.len());
                    if ta {
                        // A stored k x m: dA = op(B) * dY^T  -> (k x n)(n x m)
                        gemm_into(k, n, m, bv.data(), tb, dy, true, g, T::one());
                    } else {
                        // dA = dY * op(B)^T -> (m x n)(n x k)
                        gemm_into(m, n, k, dy, false, bv.data(), !tb, g, T::one());
                    }
                }
                if self.wants(b) {
                    let g = grad_slot(grads, b, bv.len());
                    if tb {
                        // B stored n x k: dB = dY^T * op(A) -> (n x m)(m x k)
                        gemm_into(n, m, k, dy, true, av.data(), ta, g, T::one());
                    } else {
                        // dB = op(A)^T * dY -> (k x m)(m x n)
                        gemm_into(k, m, n, av.data(), !ta, dy, false, g, T::one());
                    }
                }
            }
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.wants(v) {
                        accumulate(grad_slot(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    accumulate(grad_slot(grads, *x, dy.len()), dy);
                }
                if self.wants(*bias) {
                    let c = node.value.cols();
                    let g = grad_slot(grads, *bias, c);
                    for row in dy.chunks(c) {
                        accumulate(g, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let g = grad_slot(grads, *x, dy.len());
                    for (gi, &d) in g.iter_mut().zip(dy) {
                        *gi = *gi + d * *s;
                    }
                }
            }
            Op::MulConst { x, factor } => {
                if self.wants(*x) {
                    let g = grad_slot(grads, *x, dy.len());
                    for ((gi, &d), &f) in g.iter_mut().zip(dy).zip(factor) {
                        *gi = *gi + d * f;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let g = grad_slot(grads, *x, dy.len());
                    for ((gi, &d), &xi) in g.iter_mut().zip(dy).zip(xv) {
                        *gi = *gi + d * gelu_grad(xi);
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
                let (r, c) = (node.value.rows(), node.value.cols());
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let g = grad_slot(grads, *gamma, c);
                    for i in 0..r {
                        for j in 0..c {
                            g[j] = g[j] + dy[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let g = grad_slot(grads, *beta, c);
                    for row in dy.chunks(c) {
                        accumulate(g, row);
                    }
                }
                if self.wants(*x) {
                    let n = T::from_usize(c).unwrap();
                    let g = grad_slot(grads, *x, r * c);
                    let mut dxh = vec![T::zero(); c];
                    for i in 0..r {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..c {
                            dxh[j] = dy[i * c + j] * gv[j];
                            s1 = s1 + dxh[j];
                            s2 = s2 + dxh[j] * xhat[i * c + j];
                        }
                        let f = inv_std[i] / n;
                        for j in 0..c {
                            let v = f * (n * dxh[j] - s1 - xhat[i * c + j] * s2);
                            g[i * c + j] = g[i * c + j] + v;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let y = node.value.data();
                    let g = grad_slot(grads, *x, dy.len());
                    for ((yr, dr), gr) in y.chunks(c).zip(dy.chunks(c)).zip(g.chunks_mut(c)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            gr[j] = gr[j] + yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if self.wants(*table) {
                    let c = node.value.cols();
                    let len = self.value(*table).len();
                    let g = grad_slot(grads, *table, len);
                    for (row, &src) in dy.chunks(c).zip(idx) {
                        accumulate(&mut g[src * c..(src + 1) * c], row);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        accumulate(grad_slot(grads, p, len), &dy[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.value.rows(), node.value.cols());
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let g = grad_slot(grads, p, r * c);
                        for i in 0..r {
                            accumulate(
                                &mut g[i * c..(i + 1) * c],
                                &dy[i * total + off..i * total + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let c = node.value.cols();
                    let len = self.value(*x).len();
                    let g = grad_slot(grads, *x, len);
                    accumulate(&mut g[start * c..start * c + dy.len()], dy);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let w = node.value.cols();
                    let src_c = self.value(*x).cols();
                    let len = self.value(*x).len();
                    let g = grad_slot(grads, *x, len);
                    for (i, row) in dy.chunks(w).enumerate() {
                        let o = i * src_c + start;
                        accumulate(&mut g[o..o + w], row);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                gamma,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.value(*logits).cols();
                    let up = dy[0];
                    let g = grad_slot(grads, *logits, probs.len());
                    for (i, &y) in targets.iter().enumerate() {
                        let s = &probs[i * c..(i + 1) * c];
                        let p = s[y];
                        // d loss_i / d z_j = coef * (s_j - delta_jy)
                        let coef = if *gamma == T::zero() {
                            T::one()
                        } else {
                            let q = (T::one() - p).max(T::zero());
                            let lp = p.ln();
                            let tail = if q == T::zero() {
                                T::zero()
                            } else {
                                *gamma * q.powf(*gamma - T::one()) * p * lp
                            };
                            q.powf(*gamma) - tail
                        };
                        let f = up * weights[i] * coef;
                        for j in 0..c {
                            let delta = if j == y { T::one() } else { T::zero() };
                            g[i * c + j] = g[i * c + j] + f * (s[j] - delta);
                        }
                    }
                }
            }
            Op::Bce {
                logits,
                targets,
                scale,
            } => {
                if self.wants(*logits) {
                    let z = self.value(*logits).data();
                    let f = dy[0] * *scale;
                    let g = grad_slot(grads, *logits, z.len());
                    for ((gi, &zv), &y) in g.iter_mut().zip(z).zip(targets) {
                        *gi = *gi + f * (sigmoid(zv) - y);
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let g = grad_slot(grads, *x, len);
                    for gi in g.iter_mut() {
                        *gi = *gi + dy[0];
                    }
                }
            }
        }
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>, mask: &AttentionMask) -> Tensor<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let row = x.row(i);
        let allow = mask.row(i);
        let mx = row
            .iter()
            .zip(allow)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        let o = out.row_mut(i);
        let mut s = T::zero();
        for j in 0..c {
            if allow[j] {
                let e = (row[j] - mx).exp();
                o[j] = e;
                s = s + e;
            }
        }
        for j in 0..c {
            if allow[j] {
                o[j] = o[j] / s;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T: Real> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to any node; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).unwrap())
    }

    /// Adds every parameter gradient into `acc[id]`. Tapes may reference the
    /// same parameter several times; all uses are summed.
    pub fn accumulate_into(&self, acc: &mut [Tensor<T>]) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = acc[id.0].data_mut();
                accumulate(dst, g);
            }
        }
    }
}
