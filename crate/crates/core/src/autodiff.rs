//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and how it was produced. [`Tape::backward`] walks the nodes in
//! reverse, accumulating gradients, and consumes the tape. Nodes are created in
//! execution order, so the node list is already topologically sorted.
//!
//! Gradient flow is controlled per node: leaves created with
//! [`Tape::constant`] or [`Tape::detach`] never receive gradient, and neither
//! does anything computed only from them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on a row norm accepted by [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    L2Normalize(Var),
    Conv2d { x: Var, k: Var, stride: usize },
    Upsample(Var, usize),
    AddBias { x: Var, b: Var, axis: usize },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Nodes the loss does not
    /// depend on (including detached ones) get an all-zero tensor.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Shape split `(outer, n, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn conv_dims(
    xs: &[usize],
    ks: &[usize],
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = match xs.len() {
        3 => (1, xs[0], xs[1], xs[2]),
        4 => (xs[0], xs[1], xs[2], xs[3]),
        _ => return Err(Error::shape("conv2d", xs, ks)),
    };
    if ks.len() != 4 || ks[1] != c {
        return Err(Error::shape("conv2d", xs, ks));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be at least 1"));
    }
    let (kh, kw) = (ks[2], ks[3]);
    if kh > h || kw > w {
        return Err(Error::invalid(format!(
            "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    Ok((n, c, h, w, (h - kh) / stride + 1, (w - kw) / stride + 1))
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        self.check_open()?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.push("variable", value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Stop-gradient: same value as `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.push("detach", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        self.push(
            "transpose",
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(a),
            rg,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, Tensor::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(name, Tensor::from_parts(shape, out), op, rg)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x >= 0.0 { x } else { alpha * x },
            Op::LeakyRelu(a, alpha),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    fn reduce(
        &mut self,
        name: &'static str,
        a: Var,
        axis: Option<usize>,
        mean: bool,
    ) -> Result<Var> {
        let t = self.value(a);
        let (shape, out) = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                let v = if mean { s / t.len() as f64 } else { s };
                (vec![1], vec![v])
            }
            Some(ax) => {
                if ax >= t.rank() {
                    return Err(Error::Axis {
                        op: name,
                        axis: ax,
                        rank: t.rank(),
                    });
                }
                let (outer, n, inner) = split_axis(t.shape(), ax);
                let d = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += x;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|x| *x /= n as f64);
                }
                let mut shape: Vec<usize> = t.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, out)
            }
        };
        let op = if mean {
            Op::Mean(a, axis)
        } else {
            Op::Sum(a, axis)
        };
        let rg = self.rg(&[a]);
        self.push(name, Tensor::from_parts(shape, out), op, rg)
    }

    /// Sum over all elements (`axis = None`) or along one axis.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("sum", a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce("mean", a, axis, true)
    }

    /// Scale every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            if norm < NORM_EPS {
                return Err(Error::degenerate(format!(
                    "l2_normalize: row {r} has norm {norm:e}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(
            "l2_normalize",
            Tensor::from_parts(shape, out),
            Op::L2Normalize(a),
            rg,
        )
    }

    /// Valid cross-correlation. `x` is `[C,H,W]` or `[N,C,H,W]`, `k` is
    /// `[C_out,C_in,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        let (n, c, h, w, oh, ow) = conv_dims(&xs, &ks, stride)?;
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        let xd = self.value(x).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                let dst = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                for ic in 0..c {
                    let plane = &xd[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wv = kd[((oc * c + ic) * kh + i) * kw + j];
                            for oy in 0..oh {
                                let src = &plane[(oy * stride + i) * w + j..];
                                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                                for (ox, acc) in drow.iter_mut().enumerate() {
                                    *acc += wv * src[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if xs.len() == 3 {
            vec![o, oh, ow]
        } else {
            vec![n, o, oh, ow]
        };
        let rg = self.rg(&[x, k]);
        self.push(
            "conv2d",
            Tensor::from_parts(shape, out),
            Op::Conv2d { x, k, stride },
            rg,
        )
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample factor must be at least 1"));
        }
        let t = self.value(x);
        let r = t.rank();
        if r < 2 {
            return Err(Error::Axis {
                op: "upsample_nearest",
                axis: 1,
                rank: r,
            });
        }
        let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
        let planes = t.len() / (h * w);
        let (fh, fw) = (h * factor, w * factor);
        let mut out = vec![0.0; planes * fh * fw];
        for p in 0..planes {
            for y in 0..fh {
                for xx in 0..fw {
                    out[(p * fh + y) * fw + xx] = t.data()[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[r - 2] = fh;
        shape[r - 1] = fw;
        let rg = self.rg(&[x]);
        self.push(
            "upsample_nearest",
            Tensor::from_parts(shape, out),
            Op::Upsample(x, factor),
            rg,
        )
    }

    /// Add the vector `b` along `axis` of `x` (bias of a dense or conv layer).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if axis >= tx.rank() {
            return Err(Error::Axis {
                op: "add_bias",
                axis,
                rank: tx.rank(),
            });
        }
        if tb.rank() != 1 || tb.len() != tx.shape()[axis] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for j in 0..n {
                let bv = tb.data()[j];
                out[(o * n + j) * inner..(o * n + j + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, b]);
        self.push(
            "add_bias",
            Tensor::from_parts(shape, out),
            Op::AddBias { x, b, axis },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of no tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: t.rank(),
            });
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::invalid(format!(
                "narrow: range {start}..{} out of bounds for length {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(
            "narrow",
            Tensor::from_parts(shape, out),
            Op::Narrow { x, axis, start },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `[N,C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let c = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            total += -log_softmax_row(t.row(i))[y];
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Mean binary cross-entropy of logits against targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + libm::log1p(libm::exp(-z.abs())))
            .sum();
        let rg = self.rg(&[logits]);
        self.push(
            "bce_with_logits",
            Tensor::scalar(total / targets.len() as f64),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Propagate gradients from the scalar `loss` and consume the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_open()?;
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
        }
        Ok(Gradients {
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            grads,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.data(*b), k, n);
                    self.accumulate(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.data(*a), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, transpose_raw(g, c, r));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, g.iter().zip(db).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.iter().map(|x| c * x).collect());
            }
            Op::LeakyRelu(a, alpha) => {
                let da = self.data(*a);
                let dx = g
                    .iter()
                    .zip(da)
                    .map(|(g, &x)| if x >= 0.0 { *g } else { alpha * g })
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, dx);
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let mean = matches!(op, Op::Mean(..));
                let shape = self.shape(*a);
                let total = self.value(*a).len();
                let dx = match axis {
                    None => {
                        let v = if mean { g[0] / total as f64 } else { g[0] };
                        vec![v; total]
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(shape, *ax);
                        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
                        let mut dx = vec![0.0; total];
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                                }
                            }
                        }
                        dx
                    }
                };
                self.accumulate(grads, *a, dx);
            }
            Op::L2Normalize(a) => {
                let xa = self.data(*a);
                let d = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; xa.len()];
                for r in 0..xa.len() / d {
                    let s = r * d..(r + 1) * d;
                    let norm = libm::sqrt(xa[s.clone()].iter().map(|x| x * x).sum::<f64>());
                    let y = &out.data()[s.clone()];
                    let gr = &g[s.clone()];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dst, &yi), &gi) in dx[s].iter_mut().zip(y).zip(gr) {
                        *dst = (gi - yi * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Conv2d { x, k, stride } => self.conv_backward(*x, *k, *stride, g, grads),
            Op::Upsample(x, f) => {
                let s = self.shape(*x);
                let r = s.len();
                let (h, w) = (s[r - 2], s[r - 1]);
                let (fh, fw) = (h * f, w * f);
                let mut dx = vec![0.0; self.value(*x).len()];
                for p in 0..dx.len() / (h * w) {
                    for y in 0..fh {
                        for xx in 0..fw {
                            dx[(p * h + y / f) * w + xx / f] += g[(p * fh + y) * fw + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AddBias { x, b, axis } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*b) {
                    let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                    let mut db = vec![0.0; n];
                    for o in 0..outer {
                        for (j, acc) in db.iter_mut().enumerate() {
                            *acc += g[(o * n + j) * inner..(o * n + j + 1) * inner]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    let mut dp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[start..start + n * inner]);
                    }
                    self.accumulate(grads, *p, dp);
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    dx[to..to + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let t = self.value(*logits);
                let c = t.shape()[1];
                let scale = g[0] / targets.len() as f64;
                let mut dx = Vec::with_capacity(t.len());
                for (i, &y) in targets.iter().enumerate() {
                    let lsm = log_softmax_row(t.row(i));
                    for (j, l) in lsm.iter().enumerate() {
                        let p = libm::exp(*l);
                        dx.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                debug_assert_eq!(dx.len(), targets.len() * c);
                self.accumulate(grads, *logits, dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g[0] / targets.len() as f64;
                let dx = self
                    .data(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| scale * (sigmoid(z) - y))
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        k: Var,
        stride: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (xs, ks) = (self.shape(x), self.shape(k));
        let Ok((n, c, h, w, oh, ow)) = conv_dims(xs, ks, stride) else {
            unreachable!("shapes were validated in the forward pass")
        };
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        let (xd, kd) = (self.data(x), self.data(k));
        let need_x = self.requires_grad(x);
        let need_k = self.requires_grad(k);
        let mut dx = if need_x {
            vec![0.0; xd.len()]
        } else {
            Vec::new()
        };
        let mut dk = if need_k {
            vec![0.0; kd.len()]
        } else {
            Vec::new()
        };
        for b in 0..n {
            for oc in 0..o {
                let gp = &g[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                for ic in 0..c {
                    let base = (b * c + ic) * h * w;
                    for i in 0..kh {
                        for j in 0..kw {
                            let kidx = ((oc * c + ic) * kh + i) * kw + j;
                            let wv = kd[kidx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let row = base + (oy * stride + i) * w + j;
                                let grow = &gp[oy * ow..(oy + 1) * ow];
                                for (ox, &gv) in grow.iter().enumerate() {
                                    let xi = row + ox * stride;
                                    if need_k {
                                        acc += gv * xd[xi];
                                    }
                                    if need_x {
                                        dx[xi] += gv * wv;
                                    }
                                }
                            }
                            if need_k {
                                dk[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, dx);
        }
        if need_k {
            self.accumulate(grads, k, dk);
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let (arg, max) =
        row.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    // The max term contributes exactly 1; log1p keeps tiny tails accurate.
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| libm::exp(x - max))
        .sum();
    let tail = libm::log1p(rest);
    row.iter().map(|x| (x - max) - tail).collect()
}

/// Softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    log_softmax_row(row).into_iter().map(libm::exp).collect()
}

/// Logistic function, stable for large `|x|`.
pub fn logistic(x: f64) -> f64 {
    sigmoid(x)
}
