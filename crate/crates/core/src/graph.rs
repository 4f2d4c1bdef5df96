//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every differentiable operation executed through it
//! in execution order, so the node list is always topologically sorted.
//! Leaves are registered with [`Graph::leaf`] (a copy of a parameter or
//! input tensor); [`Graph::backward`] walks the record in reverse and adds
//! the loss gradient into each trainable leaf's accumulator. Calling
//! `backward` again without building a fresh graph accumulates on top of
//! the previous gradients.
//!
//! Broadcasting: the binary elementwise ops (`add`, `sub`, `mul`) accept
//! equal shapes, or one rank-0 scalar operand which is broadcast over the
//! other. Nothing else broadcasts; row-bias addition and row repetition
//! are explicit ops.

use crate::error::{Error, Result};
use crate::tensor::{matmul_kernel, matmul_nt_acc, matmul_tn_acc, Real, Tensor};

/// Row norms below this are rejected by [`Graph::l2_normalize`].
pub const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Scale(Var, f64),
    Recip(Var),
    AddBias(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    L2Normalize(Var),
    Sum(Var),
    Reshape(Var),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    StackTokens(Vec<Var>),
    Token { x: Var, index: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
    // Per-op saved forward state (layer-norm statistics, row norms,
    // attention probabilities).
    aux: Vec<F>,
    // Accumulated gradient; only kept for trainable leaves.
    grad: Option<Vec<F>>,
}

/// Record of executed operations; see the module docs.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of leaf nodes (parameters, inputs and constants).
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count()
    }

    /// Registers a leaf holding a copy of `t`. It is trainable iff `t`
    /// requires grad.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let needs_grad = t.requires_grad();
        let grad = needs_grad.then(|| vec![F::zero(); t.numel()]);
        self.push_node(t.detached(), Op::Leaf, needs_grad, Vec::new(), grad)
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let t = if t.requires_grad() { t.detached() } else { t };
        self.push_node(t, Op::Leaf, false, Vec::new(), None)
    }

    pub fn scalar(&mut self, value: F) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Nodes whose values were read by the operation producing `v`.
    pub fn operands(&self, v: Var) -> Vec<Var> {
        op_operands(&self.nodes[v.0].op)
    }

    fn push_node(
        &mut self,
        value: Tensor<F>,
        op: Op,
        needs_grad: bool,
        aux: Vec<F>,
        grad: Option<Vec<F>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            aux,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op, aux: Vec<F>) -> Var {
        let needs_grad = self.operands_need_grad(&op);
        self.push_node(value, op, needs_grad, aux, None)
    }

    fn operands_need_grad(&self, op: &Op) -> bool {
        op_operands(op).iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: &[usize], data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    // ---------------------------------------------------------------
    // Linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Self::make(&[m, n], out), Op::MatMul(a, b), Vec::new()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape_of(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s,
                rhs: vec![],
            });
        }
        let (m, n) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Ok(self.push(Self::make(&[n, m], out), Op::Transpose(a), Vec::new()))
    }

    // ---------------------------------------------------------------
    // Elementwise

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let (xa, xb) = (self.data(a), self.data(b));
        let (shape, out): (Vec<usize>, Vec<F>) = if sa == sb {
            (sa, xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect())
        } else if sa.is_empty() {
            let s = xa[0];
            (sb, xb.iter().map(|&q| f(s, q)).collect())
        } else if sb.is_empty() {
            let s = xb[0];
            (sa, xa.iter().map(|&p| f(p, s)).collect())
        } else {
            return Err(Error::Shape {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        Ok(self.push(Self::make(&shape, out), op, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op) -> Var {
        let shape = self.shape_of(a);
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(Self::make(&shape, out), op, Vec::new())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// Rectified linear unit; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, F::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| !(x > F::zero())) {
            return Err(Error::Domain {
                op: "log",
                value: bad.as_f64(),
            });
        }
        Ok(self.unary(a, F::ln, Op::Log(a)))
    }

    /// Multiplies by a compile-time constant (not a graph value).
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = F::of(c);
        self.unary(a, |x| x * cf, Op::Scale(a, c))
    }

    /// Elementwise `1 / x`; zero entries are a domain error.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.data(a).iter().find(|&&x| x == F::zero() || !x.is_finite()) {
            return Err(Error::Domain {
                op: "recip",
                value: bad.as_f64(),
            });
        }
        Ok(self.unary(a, F::recip, Op::Recip(a)))
    }

    /// Adds `bias[d]` to every last-axis slice of `x[..., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape_of(x), self.shape_of(bias));
        let d = *sx.last().unwrap_or(&0);
        if sx.is_empty() || sb != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        Ok(self.push(Self::make(&sx, out), Op::AddBias(x, bias), Vec::new()))
    }

    // ---------------------------------------------------------------
    // Row-wise normalizations

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape_of(a);
        let d = self.last_extent("softmax_rows", &s)?;
        let mut out = self.data(a).to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        Ok(self.push(Self::make(&s, out), Op::SoftmaxRows(a), Vec::new()))
    }

    /// Log-softmax over the last axis, stabilized by max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape_of(a);
        let d = self.last_extent("log_softmax_rows", &s)?;
        let mut out = self.data(a).to_vec();
        out.chunks_mut(d).for_each(log_softmax_in_place);
        Ok(self.push(Self::make(&s, out), Op::LogSoftmaxRows(a), Vec::new()))
    }

    /// Zero-mean unit-variance normalization over the last axis followed
    /// by the affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape_of(x);
        let d = self.last_extent("layer_norm", &s)?;
        for p in [gain, bias] {
            if self.shape_of(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: s,
                    rhs: self.shape_of(p),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let xs = self.data(x);
        let rows = xs.len() / d;
        let inv_d = F::one() / F::of(d as f64);
        let eps = F::of(eps);
        let mut out = Vec::with_capacity(xs.len());
        // aux layout: x̂ (rows·d) followed by 1/σ per row
        let mut aux = Vec::with_capacity(xs.len() + rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xs.chunks(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for j in 0..d {
                let xh = (row[j] - mean) * rstd;
                aux.push(xh);
                out.push(xh * g[j] + b[j]);
            }
            rstds.push(rstd);
        }
        aux.extend(rstds);
        Ok(self.push(Self::make(&s, out), Op::LayerNorm { x, gain, bias }, aux))
    }

    /// Scales every last-axis slice to unit Euclidean norm. Slices with
    /// norm below [`L2_NORM_EPS`] are rejected, as are non-finite slices.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.shape_of(a);
        let d = self.last_extent("l2_normalize", &s)?;
        let xs = self.data(a);
        let mut out = Vec::with_capacity(xs.len());
        let mut norms = Vec::with_capacity(xs.len() / d);
        for (i, row) in xs.chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
            if !norm.as_f64().is_finite() {
                return Err(Error::Numerical(format!("row {i} has non-finite norm {norm}")));
            }
            if norm.as_f64() < L2_NORM_EPS {
                return Err(Error::Degenerate(format!(
                    "row {i} has norm {norm} below {L2_NORM_EPS:e}"
                )));
            }
            out.extend(row.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        Ok(self.push(Self::make(&s, out), Op::L2Normalize(a), norms))
    }

    fn last_extent(&self, op: &'static str, s: &[usize]) -> Result<usize> {
        match s.last() {
            Some(&d) if d >= 1 => Ok(d),
            _ => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ---------------------------------------------------------------
    // Reductions and structural ops

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().sum::<F>();
        self.push(Tensor::scalar(total), Op::Sum(a), Vec::new())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).detached().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), Vec::new()))
    }

    /// Repeats a single row (`[d]` or `[1, d]`) `k` times into `[k, d]`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        let s = self.shape_of(a);
        let d = match s.as_slice() {
            [d] | [1, d] => *d,
            _ => {
                return Err(Error::Shape {
                    op: "repeat_rows",
                    lhs: s,
                    rhs: vec![1, 0],
                })
            }
        };
        if k == 0 {
            return Err(Error::contract("repeat_rows with k = 0"));
        }
        let out = self.data(a).repeat(k);
        Ok(self.push(Self::make(&[k, d], out), Op::RepeatRows(a), Vec::new()))
    }

    /// Gathers rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape_of(a);
        if s.len() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::contract(format!(
                "gather_rows: indices {idx:?} invalid for shape {s:?}"
            )));
        }
        let t = self.value(a).select_rows(idx);
        Ok(self.push(t, Op::Gather(a, idx.to_vec()), Vec::new()))
    }

    /// `[a | b]` along the last axis of two rank-2 tensors.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, p, q) = (sa[0], sa[1], sb[1]);
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(k * (p + q));
        for i in 0..k {
            out.extend_from_slice(&xa[i * p..(i + 1) * p]);
            out.extend_from_slice(&xb[i * q..(i + 1) * q]);
        }
        Ok(self.push(Self::make(&[k, p + q], out), Op::ConcatCols(a, b), Vec::new()))
    }

    /// Stacks `T` tensors of shape `[k, d]` into a token sequence
    /// `[k, T, d]`; token `t` of row `i` is row `i` of `parts[t]`.
    pub fn stack_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("stack_tokens needs at least one part"))?;
        let s0 = self.shape_of(*first);
        for p in parts {
            let s = self.shape_of(*p);
            if s.len() != 2 || s != s0 {
                return Err(Error::Shape {
                    op: "stack_tokens",
                    lhs: s0,
                    rhs: s,
                });
            }
        }
        let (k, d, t) = (s0[0], s0[1], parts.len());
        let mut out = vec![F::zero(); k * t * d];
        for (ti, p) in parts.iter().enumerate() {
            let x = self.data(*p);
            for i in 0..k {
                out[(i * t + ti) * d..(i * t + ti + 1) * d].copy_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
        Ok(self.push(
            Self::make(&[k, t, d], out),
            Op::StackTokens(parts.to_vec()),
            Vec::new(),
        ))
    }

    /// Token `index` of every sequence in `[k, T, d]`, as `[k, d]`.
    pub fn token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape_of(x);
        if s.len() != 3 || index >= s[1] {
            return Err(Error::contract(format!(
                "token {index} out of range for shape {s:?}"
            )));
        }
        let (k, t, d) = (s[0], s[1], s[2]);
        let xs = self.data(x);
        let mut out = Vec::with_capacity(k * d);
        for i in 0..k {
            out.extend_from_slice(&xs[(i * t + index) * d..(i * t + index + 1) * d]);
        }
        Ok(self.push(Self::make(&[k, d], out), Op::Token { x, index }, Vec::new()))
    }

    /// Multi-head scaled dot-product attention within each sequence of a
    /// `[k, T, d]` batch: sequences never attend to each other.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape_of(q);
        if s.len() != 3 || self.shape_of(k) != s || self.shape_of(v) != s {
            return Err(Error::Shape {
                op: "attention",
                lhs: s,
                rhs: self.shape_of(k),
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (xq, xk, xv) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![F::zero(); b * t * d];
        let mut probs = vec![F::zero(); b * heads * t * t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for ti in 0..t {
                    let prow = &mut probs[((bi * heads + h) * t + ti) * t..][..t];
                    let qrow = &xq[(bi * t + ti) * d + off..][..dh];
                    for si in 0..t {
                        let krow = &xk[(bi * t + si) * d + off..][..dh];
                        prow[si] = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bi * t + ti) * d + off..][..dh];
                    for si in 0..t {
                        let vrow = &xv[(bi * t + si) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += prow[si] * vv;
                        }
                    }
                }
            }
        }
        Ok(self.push(Self::make(&s, out), Op::Attention { q, k, v, heads }, probs))
    }

    // ---------------------------------------------------------------
    // Reverse pass

    /// Back-propagates from a single-element `loss`, adding into the
    /// gradient accumulators of every trainable leaf. Leaves the loss does
    /// not reach keep a zero contribution.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Op::Leaf = op {
                let acc = self.nodes[i].grad.get_or_insert_with(|| vec![F::zero(); g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                continue;
            }
            self.backprop_node(i, &op, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, op: &Op, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` if it needs one.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };

        match op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape_of(*a), self.shape_of(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (self.data(*a), self.data(*b));
                with(*a, &mut |da| matmul_nt_acc(g, xb, m, n, k, da));
                with(*b, &mut |db| matmul_tn_acc(xa, g, m, k, n, db));
            }
            Op::Transpose(a) => {
                let s = self.shape_of(*a);
                let (m, n) = (s[0], s[1]);
                with(*a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -F::one() } else { F::one() };
                with(*a, &mut |da| accumulate_broadcast(da, g, |gi, _| gi));
                with(*b, &mut |db| accumulate_broadcast(db, g, |gi, _| sign * gi));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                with(*a, &mut |da| {
                    accumulate_broadcast(da, g, |gi, j| gi * pick(xb, j));
                });
                with(*b, &mut |db| {
                    accumulate_broadcast(db, g, |gi, j| gi * pick(xa, j));
                });
            }
            Op::Neg(a) => with(*a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi);
            }),
            Op::Relu(a) => {
                let x = self.data(*a);
                with(*a, &mut |da| {
                    for j in 0..g.len() {
                        if x[j] > F::zero() {
                            da[j] += g[j];
                        }
                    }
                });
            }
            Op::Exp(a) => with(*a, &mut |da| {
                for j in 0..g.len() {
                    da[j] += g[j] * y[j];
                }
            }),
            Op::Log(a) => {
                let x = self.data(*a);
                with(*a, &mut |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] / x[j];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = F::of(*c);
                with(*a, &mut |da| {
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * c);
                });
            }
            Op::Recip(a) => with(*a, &mut |da| {
                for j in 0..g.len() {
                    da[j] -= g[j] * y[j] * y[j];
                }
            }),
            Op::AddBias(x, b) => {
                let d = self.shape_of(*b)[0];
                with(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
                with(*b, &mut |db| {
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let d = node.value.cols();
                with(*a, &mut |da| {
                    for ((dr, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let inner = dot(yr, gr);
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let d = node.value.cols();
                with(*a, &mut |da| {
                    for ((dr, yr), gr) in da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                        let gsum = gr.iter().copied().sum::<F>();
                        for j in 0..d {
                            dr[j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = node.value.cols();
                let n = node.value.numel();
                let (xhat, rstd) = node.aux.split_at(n);
                let gv = self.data(*gain);
                with(*gain, &mut |dg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                });
                with(*bias, &mut |db| {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(p, &q)| *p += q);
                    }
                });
                let inv_d = F::one() / F::of(d as f64);
                with(*x, &mut |dx| {
                    for (r, ((dr, gr), xr)) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dr[j] += rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::L2Normalize(a) => {
                let d = node.value.cols();
                let norms = &node.aux;
                with(*a, &mut |da| {
                    for (r, ((dr, yr), gr)) in
                        da.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)).enumerate()
                    {
                        let inner = dot(yr, gr);
                        for j in 0..d {
                            dr[j] += (gr[j] - yr[j] * inner) / norms[r];
                        }
                    }
                });
            }
            Op::Sum(a) => with(*a, &mut |da| da.iter_mut().for_each(|p| *p += g[0])),
            Op::Reshape(a) => with(*a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            }),
            Op::RepeatRows(a) => with(*a, &mut |da| {
                let d = da.len();
                for row in g.chunks(d) {
                    da.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                }
            }),
            Op::Gather(a, idx) => {
                let d = node.value.cols();
                with(*a, &mut |da| {
                    for (r, &src) in idx.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        da[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.shape_of(*a)[1], self.shape_of(*b)[1]);
                with(*a, &mut |da| {
                    for (dr, gr) in da.chunks_mut(p).zip(g.chunks(p + q)) {
                        dr.iter_mut().zip(&gr[..p]).for_each(|(x, &v)| *x += v);
                    }
                });
                with(*b, &mut |db| {
                    for (dr, gr) in db.chunks_mut(q).zip(g.chunks(p + q)) {
                        dr.iter_mut().zip(&gr[p..]).for_each(|(x, &v)| *x += v);
                    }
                });
            }
            Op::StackTokens(parts) => {
                let s = node.value.shape();
                let (k, t, d) = (s[0], s[1], s[2]);
                for (ti, p) in parts.iter().enumerate() {
                    with(*p, &mut |dp| {
                        for i in 0..k {
                            let gr = &g[(i * t + ti) * d..(i * t + ti + 1) * d];
                            dp[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(x, &v)| *x += v);
                        }
                    });
                }
            }
            Op::Token { x, index } => {
                let s = self.shape_of(*x);
                let (k, t, d) = (s[0], s[1], s[2]);
                with(*x, &mut |dx| {
                    for i in 0..k {
                        dx[(i * t + index) * d..(i * t + index + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                            .for_each(|(p, &v)| *p += v);
                    }
                });
            }
            Op::Attention { q, k, v, heads } => {
                self.attention_backward(node, *q, *k, *v, *heads, g, &mut with);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<F>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        g: &[F],
        with: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [F])),
    ) {
        let s = node.value.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let probs = &node.aux;
        let (xq, xk, xv) = (self.data(q), self.data(k), self.data(v));

        // dScores[b,h,t,s] = p ⊙ (dP − Σ_s p·dP), dP[t,s] = dO[t]·v[s]
        let mut dscores = vec![F::zero(); probs.len()];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for ti in 0..t {
                    let base = ((bi * heads + h) * t + ti) * t;
                    let prow = &probs[base..base + t];
                    let grow = &g[(bi * t + ti) * d + off..][..dh];
                    let dp: Vec<F> = (0..t)
                        .map(|si| dot(grow, &xv[(bi * t + si) * d + off..][..dh]))
                        .collect();
                    let inner = dot(prow, &dp);
                    for si in 0..t {
                        dscores[base + si] = prow[si] * (dp[si] - inner) * scale;
                    }
                }
            }
        }
        with(v, &mut |dv| {
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    for ti in 0..t {
                        let base = ((bi * heads + h) * t + ti) * t;
                        let grow = &g[(bi * t + ti) * d + off..][..dh];
                        for si in 0..t {
                            let p = probs[base + si];
                            let dvrow = &mut dv[(bi * t + si) * d + off..][..dh];
                            dvrow.iter_mut().zip(grow).for_each(|(x, &gv)| *x += p * gv);
                        }
                    }
                }
            }
        });
        with(q, &mut |dq| {
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    for ti in 0..t {
                        let base = ((bi * heads + h) * t + ti) * t;
                        let dqrow = &mut dq[(bi * t + ti) * d + off..][..dh];
                        for si in 0..t {
                            let ds = dscores[base + si];
                            let krow = &xk[(bi * t + si) * d + off..][..dh];
                            dqrow.iter_mut().zip(krow).for_each(|(x, &kv)| *x += ds * kv);
                        }
                    }
                }
            }
        });
        with(k, &mut |dk| {
            for bi in 0..b {
                for h in 0..heads {
                    let off = h * dh;
                    for ti in 0..t {
                        let base = ((bi * heads + h) * t + ti) * t;
                        let qrow = &xq[(bi * t + ti) * d + off..][..dh];
                        for si in 0..t {
                            let ds = dscores[base + si];
                            let dkrow = &mut dk[(bi * t + si) * d + off..][..dh];
                            dkrow.iter_mut().zip(qrow).for_each(|(x, &qv)| *x += ds * qv);
                        }
                    }
                }
            }
        });
    }
}

fn op_operands(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Neg(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Scale(a, _)
        | Op::Recip(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::L2Normalize(a)
        | Op::Sum(a)
        | Op::Reshape(a)
        | Op::RepeatRows(a)
        | Op::Gather(a, _)
        | Op::Token { x: a, .. } => vec![*a],
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::StackTokens(vs) => vs.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut s = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Element `j` of an operand, or its only element when it is a broadcast
/// scalar.
#[inline]
fn pick<F: Real>(x: &[F], j: usize) -> F {
    if x.len() == 1 {
        x[0]
    } else {
        x[j]
    }
}

/// Adds `f(g[j], j)` into `dst`, summing over `g` when `dst` is a
/// broadcast scalar.
fn accumulate_broadcast<F: Real>(dst: &mut [F], g: &[F], f: impl Fn(F, usize) -> F) {
    if dst.len() == g.len() {
        for j in 0..g.len() {
            dst[j] += f(g[j], j);
        }
    } else {
        debug_assert_eq!(dst.len(), 1);
        let mut s = F::zero();
        for j in 0..g.len() {
            s += f(g[j], j);
        }
        dst[0] += s;
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Numerically stable log-softmax of one row, in place.
pub fn log_softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    for x in row.iter_mut() {
        *x -= lse;
    }
}
