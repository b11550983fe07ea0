//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in creation order, which is a topological
//! order by construction. [`Graph::backward`] walks the tape in exact reverse,
//! so every node's gradient is complete before it is pushed to its inputs.
//! Graphs are built fresh per training step; parameters live outside in a
//! [`crate::params::ParamStore`] and are copied in as leaves.

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softmax_slice,
    Scalar, Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Sum(Var),
    Reshape(Var),
    Permute0213(Var),
    PrependTokens {
        x: Var,
        tokens: Var,
    },
    SelectToken {
        x: Var,
        index: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    BceWithLogits {
        logits: Var,
        labels: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves that require grad.
    grad: Option<Vec<S>>,
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    verify: bool,
}

fn dims_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            verify: false,
        }
    }

    /// A graph that checks every op output for NaN/Inf and fails fast.
    pub fn verifying() -> Self {
        Graph {
            nodes: Vec::new(),
            verify: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = S::zero());
            }
        }
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![S::zero(); t.len()]);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if self.verify && !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[..., k] · b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dims_err("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![S::zero(); m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul over the leading axis: `a[B,m,k] · b[B,k,n]`, or
    /// `a[B,m,k] · b[B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dims_err("bmm", &sa, &sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(dims_err("bmm", &sa, &sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); bs * m * n];
        for i in 0..bs {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(ai, bi, oi, m, n, k);
            } else {
                gemm_acc(ai, bi, oi, m, k, n);
            }
        }
        self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        )
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x` (bias-add,
    /// positional embeddings, plain same-shape addition).
    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(dims_err("add", &sx, &sy));
        }
        let yd = self.value(y).data();
        let period = yd.len();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len());
        for c in xd.chunks(period) {
            out.extend(c.iter().zip(yd).map(|(&a, &b)| a + b));
        }
        self.push(Tensor::new(sx, out)?, Op::AddBroadcast(x, y), &[x, y])
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx != sy {
            return Err(dims_err("mul", &sx, &sy));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(y).data())
            .map(|(&a, &b)| a * b)
            .collect();
        self.push(Tensor::new(sx, out)?, Op::Mul(x, y), &[x, y])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::from_f64(c);
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(x, c), &[x])
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); xd.len()];
        let mut buf_in = vec![S::zero(); n];
        let mut buf_out = vec![S::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for t in 0..n {
                    buf_in[t] = xd[base + t * inner];
                }
                softmax_slice(&buf_in, &mut buf_out);
                for t in 0..n {
                    out[base + t * inner] = buf_out[t];
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layernorm eps must be > 0, got {eps}"
            )));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(dims_err("layernorm", &shape, self.shape(gain)));
        }
        let eps = S::from_f64(eps);
        let dn = S::from_f64(d as f64);
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xd.len() / d;
        let mut xhat = vec![S::zero(); xd.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu(x), &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::new(vec![1], vec![s])?, Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// `[a,b,c,d] → [a,c,b,d]`; used to split and merge attention heads.
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "permute_0213 needs rank 4, got {s:?}"
            )));
        }
        let out = permute_0213_data(self.value(x).data(), &s);
        self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out)?,
            Op::Permute0213(x),
            &[x],
        )
    }

    /// Prepend the rows of `tokens[k,d]` to every sequence of `x[N,L,d]`.
    pub fn prepend_tokens(&mut self, x: Var, tokens: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x).to_vec(), self.shape(tokens).to_vec());
        if sx.len() != 3 || st.len() != 2 || st[1] != sx[2] {
            return Err(dims_err("prepend_tokens", &sx, &st));
        }
        let (n, l, d) = (sx[0], sx[1], sx[2]);
        let k = st[0];
        let (xd, td) = (self.value(x).data(), self.value(tokens).data());
        let mut out = Vec::with_capacity(n * (k + l) * d);
        for i in 0..n {
            out.extend_from_slice(td);
            out.extend_from_slice(&xd[i * l * d..(i + 1) * l * d]);
        }
        self.push(
            Tensor::new(vec![n, k + l, d], out)?,
            Op::PrependTokens { x, tokens },
            &[x, tokens],
        )
    }

    /// Token `index` of each sequence: `x[N,L,d] → [N,d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::Dimension(format!(
                "select_token {index} invalid for {s:?}"
            )));
        }
        let (n, l, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let base = (i * l + index) * d;
            out.extend_from_slice(&xd[base..base + d]);
        }
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::SelectToken { x, index },
            &[x],
        )
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::Dimension(format!(
                "gather_rows {rows:?} invalid for {s:?}"
            )));
        }
        let d = s[1];
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Arithmetic mean over rows: `x[R,d] → [1,d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "mean_rows needs rank 2, got {s:?}"
            )));
        }
        let (r, d) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); d];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&xd[i * d..(i + 1) * d]) {
                *o = *o + v;
            }
        }
        let rn = S::from_f64(r as f64);
        out.iter_mut().for_each(|v| *v = *v / rn);
        self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), &[x])
    }

    /// `[r,d1] ‖ [r,d2] → [r,d1+d2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(dims_err("concat_cols", &sa, &sb));
        }
        let (r, d1, d2) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * (d1 + d2));
        for i in 0..r {
            out.extend_from_slice(&ad[i * d1..(i + 1) * d1]);
            out.extend_from_slice(&bd[i * d2..(i + 1) * d2]);
        }
        self.push(
            Tensor::new(vec![r, d1 + d2], out)?,
            Op::ConcatCols(a, b),
            &[a, b],
        )
    }

    /// Stack rank-2 tensors with equal width along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat_rows of nothing".into()))?;
        let d = self.shape(*first)[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d {
                return Err(dims_err("concat_rows", &[rows, d], s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `labels`, in the
    /// stable form `max(z,0) − z·y + log(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "bce: {} logits vs {} labels",
                z.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("label {bad} is not 0 or 1")));
        }
        let labels: Vec<S> = labels.iter().map(|&y| S::from_f64(y)).collect();
        let total: S = z
            .iter()
            .zip(&labels)
            .map(|(&zi, &yi)| bce_term(zi, yi))
            .sum();
        let mean = total / S::from_f64(z.len() as f64);
        self.push(
            Tensor::new(vec![1], vec![mean])?,
            Op::BceWithLogits { logits, labels },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`]; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.nodes[idx].grad.as_mut().expect("leaf grad buffer");
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a = *a + *v;
                }
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match grads[input.0].as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&contrib) {
                            *a = *a + *v;
                        }
                    }
                    None => grads[input.0] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = tb.shape()[0];
                let n = tb.shape()[1];
                let m = ta.len() / k;
                if self.wants(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm_nt_acc(g, tb.data(), &mut da, m, k, n);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn_acc(ta.data(), g, &mut db, m, k, n);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (ta.data(), tb.data());
                if self.wants(*a) {
                    let mut da = vec![S::zero(); bs * m * k];
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // C = A·Bᵀ, B is n×k: dA = G·B
                            gemm_acc(gi, bi, dai, m, n, k);
                        } else {
                            gemm_nt_acc(gi, bi, dai, m, k, n);
                        }
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); bs * k * n];
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB = Gᵀ·A, shape n×k
                            gemm_tn_acc(gi, ai, dbi, m, n, k);
                        } else {
                            gemm_tn_acc(ai, gi, dbi, m, k, n);
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.wants(*y) {
                    let period = self.value(*y).len();
                    let mut dy = vec![S::zero(); period];
                    for chunk in g.chunks(period) {
                        for (a, &v) in dy.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                    out.push((*y, dy));
                }
            }
            Op::Mul(x, y) => {
                let (xd, yd) = (self.value(*x).data(), self.value(*y).data());
                if self.wants(*x) {
                    out.push((*x, g.iter().zip(yd).map(|(&a, &b)| a * b).collect()));
                }
                if self.wants(*y) {
                    out.push((*y, g.iter().zip(xd).map(|(&a, &b)| a * b).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = S::zero();
                        for t in 0..n {
                            let p = base + t * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for t in 0..n {
                            let p = base + t * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let gd = self.value(*gain).data();
                let rows = xhat.len() / d;
                if self.wants(*x) {
                    let dn = S::from_f64(d as f64);
                    let mut dx = vec![S::zero(); xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dx[r * d + j] = rstd[r] * (dh - sum_dh / dn - hr[j] * sum_dh_h / dn);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![S::zero(); d];
                    for chunk in g.chunks(d) {
                        for (a, &v) in db.iter_mut().zip(chunk) {
                            *a = *a + v;
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                out.push((
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect(),
                ));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute0213(x) => {
                let s = node.value.shape();
                out.push((*x, permute_0213_data(g, s)));
            }
            Op::PrependTokens { x, tokens } => {
                let s = node.value.shape();
                let (n, lk, d) = (s[0], s[1], s[2]);
                let k = self.value(*tokens).shape()[0];
                let l = lk - k;
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(n * l * d);
                    for i in 0..n {
                        dx.extend_from_slice(&g[(i * lk + k) * d..(i + 1) * lk * d]);
                    }
                    out.push((*x, dx));
                }
                if self.wants(*tokens) {
                    let mut dt = vec![S::zero(); k * d];
                    for i in 0..n {
                        let src = &g[i * lk * d..(i * lk + k) * d];
                        for (a, &v) in dt.iter_mut().zip(src) {
                            *a = *a + v;
                        }
                    }
                    out.push((*tokens, dt));
                }
            }
            Op::SelectToken { x, index } => {
                let s = self.value(*x).shape();
                let (n, l, d) = (s[0], s[1], s[2]);
                let mut dx = vec![S::zero(); n * l * d];
                for i in 0..n {
                    let base = (i * l + index) * d;
                    dx[base..base + d].copy_from_slice(&g[i * d..(i + 1) * d]);
                }
                out.push((*x, dx));
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let mut dx = vec![S::zero(); tx.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] = dx[r * d + j] + g[i * d + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::MeanRows(x) => {
                let s = self.value(*x).shape();
                let (r, d) = (s[0], s[1]);
                let rn = S::from_f64(r as f64);
                let row: Vec<S> = g.iter().map(|&v| v / rn).collect();
                let mut dx = Vec::with_capacity(r * d);
                for _ in 0..r {
                    dx.extend_from_slice(&row);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(a, b) => {
                let d1 = self.value(*a).shape()[1];
                let d2 = self.value(*b).shape()[1];
                let r = node.value.shape()[0];
                let w = d1 + d2;
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(r * d1);
                    for i in 0..r {
                        da.extend_from_slice(&g[i * w..i * w + d1]);
                    }
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(r * d2);
                    for i in 0..r {
                        db.extend_from_slice(&g[i * w + d1..(i + 1) * w]);
                    }
                    out.push((*b, db));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        out.push((p, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits).data();
                let bn = S::from_f64(z.len() as f64);
                out.push((
                    *logits,
                    z.iter()
                        .zip(labels)
                        .map(|(&zi, &yi)| g[0] * (sigmoid(zi) - yi) / bn)
                        .collect(),
                ));
            }
        }
        out
    }
}

/// Per-element binary cross-entropy on a logit.
pub fn bce_term<S: Scalar>(z: S, y: S) -> S {
    z.max(S::zero()) - z * y + (S::one() + (-z.abs()).exp()).ln()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swap axes 1 and 2 of a rank-4 buffer with shape `s`.
fn permute_0213_data<S: Scalar>(x: &[S], s: &[usize]) -> Vec<S> {
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![S::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul { .. } => "bmm",
        Op::AddBroadcast(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layernorm",
        Op::Gelu(..) => "gelu",
        Op::Sum(..) => "sum",
        Op::Reshape(..) => "reshape",
        Op::Permute0213(..) => "permute_0213",
        Op::PrependTokens { .. } => "prepend_tokens",
        Op::SelectToken { .. } => "select_token",
        Op::GatherRows { .. } => "gather_rows",
        Op::MeanRows(..) => "mean_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}
