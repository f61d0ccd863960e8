// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward pass. [`Tape::backward`] walks the nodes once in
//! reverse order, which is a valid reverse topological order because a node
//! can only reference nodes recorded before it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::conv::{col2im_accumulate, conv_out_extent, im2col};
use crate::error::{shape_err, Error, Result};
use crate::real::{gemm, Real};
use crate::tensor::{numel, permute_copy, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a differentiable input. Inputs the loss does not depend
    /// on get a zero tensor of their shape via [`Gradients::wrt`].
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// One gradient per requested variable, zero-filled where the loss does
    /// not depend on it.
    pub fn wrt(&mut self, tape: &Tape<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|&v| {
                self.take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a trainable parameter or an attacked image).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else {
            let bc = Broadcast::new(va.shape(), vb.shape()).ok_or_else(|| {
                shape_err(op.name(), format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()))
            })?;
            let (da, db) = (va.data(), vb.data());
            let mut out = Vec::with_capacity(numel(&bc.out));
            bc.each(|_, ia, ib| out.push(f(da[ia], db[ib])));
            Tensor::new(&bc.out, out)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::ZERO { x } else { T::ZERO })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = rowwise(v, "softmax", |row, out| softmax_row(row, out))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = rowwise(v, "log_softmax", |row, out| log_softmax_row(row, out))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), rg))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product `op(a)·op(b)` where `op` optionally transposes
    /// the trailing two axes. Operands are `[m, k]` or `[g, m, k]`; a rank-2
    /// operand is shared across the batch of the other.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let dims = BmmDims::new(self.shape(a), self.shape(b), ta, tb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; dims.g * dims.m * dims.n];
        for bi in 0..dims.g {
            gemm(
                dims.m,
                dims.k,
                dims.n,
                &va[dims.a_off(bi)..],
                ta,
                &vb[dims.b_off(bi)..],
                tb,
                T::ZERO,
                &mut out[bi * dims.m * dims.n..],
            );
        }
        let out = Tensor::new(&dims.out_shape(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Bmm { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm(a, b, false, false)
    }

    /// Batched 2-D convolution: input `[B, C_in, H, W]`, kernel
    /// `[C_out, C_in, k, k]` → `[B, C_out, H', W']`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (is, ks) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if is.len() != 4 || ks.len() != 4 || ks[2] != ks[3] {
            return Err(shape_err("conv2d", format!("input {is:?}, kernel {ks:?}")));
        }
        let (b, cin, h, w) = (is[0], is[1], is[2], is[3]);
        let (cout, kcin, k) = (ks[0], ks[1], ks[2]);
        if kcin != cin {
            return Err(shape_err("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        let ho = conv_out_extent(h, k, stride, pad)?;
        let wo = conv_out_extent(w, k, stride, pad)?;
        let (rows, plane) = (cin * k * k, ho * wo);
        let mut cols = vec![T::ZERO; b * rows * plane];
        let mut out = vec![T::ZERO; b * cout * plane];
        let xin = self.value(input).data();
        let kd = self.value(kernel).data();
        for bi in 0..b {
            let col = &mut cols[bi * rows * plane..(bi + 1) * rows * plane];
            im2col(&xin[bi * cin * h * w..(bi + 1) * cin * h * w], cin, h, w, k, stride, pad, col);
            gemm(cout, rows, plane, kd, false, col, false, T::ZERO, &mut out[bi * cout * plane..]);
        }
        let out = Tensor::new(&[b, cout, ho, wo], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over `[B, C, H, W]`; ties keep the first
    /// maximum in row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(shape_err("maxpool2", format!("input {s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(bc * ho * wo);
        let mut argmax = Vec::with_capacity(bc * ho * wo);
        for plane in 0..bc {
            let base = plane * h * w;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * y + dy) * w + 2 * xo + dx;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Mean cross-entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err("cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("cross_entropy", format!("label {bad} out of {k} classes")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::ZERO; x.len()];
        let mut logp = vec![T::ZERO; k];
        let mut total = T::ZERO;
        for (i, &l) in labels.iter().enumerate() {
            let row = &x[i * k..(i + 1) * k];
            log_softmax_row(row, &mut logp);
            total -= logp[l];
            for j in 0..k {
                probs[i * k + j] = logp[j].exp();
            }
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- composites -------------------------------------------------------

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// `mean(|a|)`.
    pub fn mean_abs(&mut self, a: Var) -> Var {
        let ab = self.abs(a);
        self.mean(ab)
    }

    /// Mean over rows of `KL(softmax(a_row) || softmax(b_row))`.
    pub fn kl_rowwise(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 2 {
            return Err(shape_err("kl_rowwise", format!("{sa:?} vs {sb:?}")));
        }
        let rows = sa[0];
        let lp = self.log_softmax(a)?;
        let lq = self.log_softmax(b)?;
        let p = self.exp(lp);
        let diff = self.sub(lp, lq)?;
        let terms = self.mul(p, diff)?;
        let total = self.sum(terms);
        Ok(self.scale(total, T::ONE / T::from_f64(rows as f64)))
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::Invalid("weighted_sum of no terms".into()))
    }

    // ---- backward ---------------------------------------------------------

    /// First node whose value holds a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(Error::NonFinite {
                    op: n.op.name(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// Gradients of scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                if sa == sb {
                    if let Some(ga) = self.acc(grads, a) {
                        ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                    }
                    if let Some(gb) = self.acc(grads, b) {
                        if neg {
                            gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d);
                        } else {
                            gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                        }
                    }
                } else {
                    let bc = Broadcast::new(&sa, &sb).expect("forward checked broadcast");
                    if let Some(ga) = self.acc(grads, a) {
                        bc.each(|o, ia, _| ga[ia] += g[o]);
                    }
                    if let Some(gb) = self.acc(grads, b) {
                        if neg {
                            bc.each(|o, _, ib| gb[ib] -= g[o]);
                        } else {
                            bc.each(|o, _, ib| gb[ib] += g[o]);
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if va.shape() == vb.shape() {
                    if let Some(ga) = self.acc(grads, a) {
                        for ((x, &d), &o) in ga.iter_mut().zip(g).zip(vb.data()) {
                            *x += d * o;
                        }
                    }
                    if let Some(gb) = self.acc(grads, b) {
                        for ((x, &d), &o) in gb.iter_mut().zip(g).zip(va.data()) {
                            *x += d * o;
                        }
                    }
                } else {
                    let bc = Broadcast::new(va.shape(), vb.shape()).expect("forward checked broadcast");
                    let (da, db) = (va.data(), vb.data());
                    if let Some(ga) = self.acc(grads, a) {
                        bc.each(|o, ia, ib| ga[ia] += g[o] * db[ib]);
                    }
                    if let Some(gb) = self.acc(grads, b) {
                        bc.each(|o, ia, ib| gb[ib] += g[o] * da[ia]);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * c);
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(y) {
                        if o > T::ZERO {
                            *x += d;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * o * (T::ONE - o);
                    }
                }
            }
            &Op::Abs(a) => {
                let va = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(va) {
                        *x += d * o.signum_or_zero();
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(y) {
                        *x += d * o;
                    }
                }
            }
            &Op::Ln(a) => {
                let va = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(va) {
                        *x += d / o;
                    }
                }
            }
            &Op::Square(a) => {
                let va = self.value(a).data();
                let two = T::from_f64(2.0);
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, &d), &o) in ga.iter_mut().zip(g).zip(va) {
                        *x += two * d * o;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            &Op::Mean(a) => {
                let n = T::from_f64(self.value(a).numel() as f64);
                if let Some(ga) = self.acc(grads, a) {
                    let d = g[0] / n;
                    ga.iter_mut().for_each(|x| *x += d);
                }
            }
            &Op::Softmax(a) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                if let Some(ga) = self.acc(grads, a) {
                    for ((gr, yr), xr) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..k {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                let k = *node.value.shape().last().unwrap_or(&1);
                if let Some(ga) = self.acc(grads, a) {
                    for ((gr, yr), xr) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..k {
                            xr[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d);
                }
            }
            Op::Permute(a, perm) => {
                let a = *a;
                if self.rg(a) {
                    // inverse permutation maps the output gradient back
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let out_shape = node.value.shape();
                    let ostr = strides(out_shape);
                    let in_shape = self.shape(a).to_vec();
                    let src_strides: Vec<usize> = inv.iter().map(|&p| ostr[p]).collect();
                    let mut back = Vec::with_capacity(g.len());
                    permute_copy(g, &in_shape, &src_strides, &mut back);
                    let ga = self.acc(grads, a).expect("requires grad");
                    ga.iter_mut().zip(&back).for_each(|(x, &d)| *x += d);
                }
            }
            &Op::Bmm { a, b, ta, tb } => {
                let dims = BmmDims::new(self.shape(a), self.shape(b), ta, tb)?;
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if let Some(ga) = self.acc(grads, a) {
                    for bi in 0..dims.g {
                        let gc = &g[bi * m * n..];
                        let off = dims.a_off(bi);
                        if ta {
                            gemm(k, n, m, &vb[dims.b_off(bi)..], tb, gc, true, T::ONE, &mut ga[off..]);
                        } else {
                            gemm(m, n, k, gc, false, &vb[dims.b_off(bi)..], !tb, T::ONE, &mut ga[off..]);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for bi in 0..dims.g {
                        let gc = &g[bi * m * n..];
                        let off = dims.b_off(bi);
                        if tb {
                            gemm(n, m, k, gc, true, &va[dims.a_off(bi)..], ta, T::ONE, &mut gb[off..]);
                        } else {
                            gemm(k, m, n, &va[dims.a_off(bi)..], !ta, gc, false, T::ONE, &mut gb[off..]);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                let is = self.shape(input).to_vec();
                let ks = self.shape(kernel).to_vec();
                let os = node.value.shape();
                let (b, cin, h, w) = (is[0], is[1], is[2], is[3]);
                let (cout, k) = (ks[0], ks[2]);
                let (rows, plane) = (cin * k * k, os[2] * os[3]);
                if let Some(gk) = self.acc(grads, kernel) {
                    for bi in 0..b {
                        let go = &g[bi * cout * plane..(bi + 1) * cout * plane];
                        let col = &cols[bi * rows * plane..(bi + 1) * rows * plane];
                        gemm(cout, plane, rows, go, false, col, true, T::ONE, gk);
                    }
                }
                if self.rg(input) {
                    let kd = self.value(kernel).data().to_vec();
                    let gi = self.acc(grads, input).expect("requires grad");
                    let mut dcol = vec![T::ZERO; rows * plane];
                    for bi in 0..b {
                        let go = &g[bi * cout * plane..(bi + 1) * cout * plane];
                        gemm(rows, cout, plane, &kd, true, go, false, T::ZERO, &mut dcol);
                        col2im_accumulate(
                            &dcol,
                            cin,
                            h,
                            w,
                            k,
                            stride,
                            pad,
                            &mut gi[bi * cin * h * w..(bi + 1) * cin * h * w],
                        );
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gi) = self.acc(grads, *input) {
                    for (&j, &d) in argmax.iter().zip(g) {
                        gi[j as usize] += d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { T::ONE } else { T::ZERO };
                            gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
/// Logistic function, kept strictly inside (0, 1) when it would round to an endpoint.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        let s = T::ONE / (T::ONE + (-x).exp());
        if s < T::BELOW_ONE { s } else { T::BELOW_ONE }
    } else {
        let e = x.exp();
        let s = e / (T::ONE + e);
        if s > T::MIN_POSITIVE { s } else { T::MIN_POSITIVE }
    }
}

fn rowwise<T: Real>(v: &Tensor<T>, op: &'static str, f: impl Fn(&[T], &mut [T])) -> Result<Tensor<T>> {
    let k = *v
        .shape()
        .last()
        .ok_or_else(|| shape_err(op, "rank-0 input".into()))?;
    let mut out = vec![T::ZERO; v.numel()];
    for (row, o) in v.data().chunks(k).zip(out.chunks_mut(k)) {
        f(row, o);
    }
    Tensor::new(v.shape(), out)
}

pub fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], T::max);
    let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

pub fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut total = T::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mx).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Right-aligned broadcasting between two shapes.
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let r = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; r - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let (ra, rb) = (strides(&pa), strides(&pb));
        let mut out = Vec::with_capacity(r);
        let mut sa = Vec::with_capacity(r);
        let mut sb = Vec::with_capacity(r);
        for i in 0..r {
            let d = match (pa[i], pb[i]) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return None,
            };
            out.push(d);
            sa.push(if pa[i] == 1 { 0 } else { ra[i] });
            sb.push(if pb[i] == 1 { 0 } else { rb[i] });
        }
        Some(Self { out, sa, sb })
    }

    /// Visit every output element with its source offsets in `a` and `b`.
    fn each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let r = self.out.len();
        if r == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = self.out[r - 1];
        let (ia_s, ib_s) = (self.sa[r - 1], self.sb[r - 1]);
        let outer: usize = self.out[..r - 1].iter().product();
        let mut idx = vec![0usize; r - 1];
        let (mut ba, mut bb) = (0usize, 0usize);
        let mut o = 0usize;
        for _ in 0..outer {
            for j in 0..inner {
                f(o, ba + j * ia_s, bb + j * ib_s);
                o += 1;
            }
            let mut ax = r - 1;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                ba += self.sa[ax];
                bb += self.sb[ax];
                if idx[ax] < self.out[ax] {
                    break;
                }
                ba -= self.sa[ax] * self.out[ax];
                bb -= self.sb[ax] * self.out[ax];
                idx[ax] = 0;
            }
        }
    }
}

struct BmmDims {
    g: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    rank3: bool,
}

impl BmmDims {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let bad = || shape_err("bmm", format!("{sa:?}{} x {sb:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }));
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(bad());
        }
        let (a_batched, b_batched) = (sa.len() == 3, sb.len() == 3);
        let ga = if a_batched { sa[0] } else { 1 };
        let gb = if b_batched { sb[0] } else { 1 };
        if a_batched && b_batched && ga != gb {
            return Err(bad());
        }
        let (ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(bad());
        }
        Ok(Self {
            g: ga.max(gb),
            m,
            k,
            n,
            a_batched,
            b_batched,
            rank3: a_batched || b_batched,
        })
    }

    fn a_off(&self, bi: usize) -> usize {
        if self.a_batched {
            bi * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, bi: usize) -> usize {
        if self.b_batched {
            bi * self.k * self.n
        } else {
            0
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.rank3 {
            vec![self.g, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}
