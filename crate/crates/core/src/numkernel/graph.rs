use std::collections::BTreeMap;

use crate::real::Real;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn};
use super::{KernelError, Tensor};

/// Smallest norm used by l2-normalize and the clamp applied before logs in KL.
pub(crate) const NORM_EPS: f64 = 1e-12;

/// Handle to a node on one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dAttrs {
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    size: usize,
    stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Leaf {
    Param,
    Input,
    Constant,
}

enum Op<T> {
    Leaf(Leaf),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<T> },
    Relu { x: NodeId },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    AvgPool2d { x: NodeId, geom: PoolGeom },
    Reshape { x: NodeId },
    L2Normalize { x: NodeId, norms: Vec<T> },
    MatMulNt { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    LogSoftmax { x: NodeId },
    Exp { x: NodeId },
    NllMean { x: NodeId, targets: Vec<usize> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    KlRows { p: NodeId, q: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of the loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradients for `ids` in order; fails on the first id without one.
    pub fn collect(mut self, ids: &[NodeId]) -> Result<Vec<Tensor<T>>, KernelError> {
        ids.iter()
            .enumerate()
            .map(|(pos, id)| self.grads.remove(id).ok_or(KernelError::MissingGrad(pos)))
            .collect()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf(Leaf::Param), true)
    }

    /// Data leaf: never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf(Leaf::Input), false)
    }

    /// Constant leaf, e.g. memory-bank rows inside the loss.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf(Leaf::Constant), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn check(&self, ids: &[NodeId]) -> Result<(), KernelError> {
        match ids.iter().find(|id| id.0 >= self.nodes.len()) {
            Some(id) => Err(KernelError::UnknownNode(id.0)),
            None => Ok(()),
        }
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// `y = x Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x, w, b])?;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(mismatch("affine", &[xs, ws, bs]));
        }
        let (n, fan_in, out) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(self.value(b).data());
        }
        gemm_nt(n, fan_in, out, self.value(x).data(), self.value(w).data(), &mut y);
        let value = Tensor::new(vec![n, out], y)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Affine { x, w, b }, rg))
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, KH, KW]` plus bias `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        attrs: Conv2dAttrs,
    ) -> Result<NodeId, KernelError> {
        self.check(&[x, w, b])?;
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(mismatch("conv2d", &[xs, ws, bs]));
        }
        if attrs.stride == 0 {
            return Err(KernelError::InvalidAttr {
                op: "conv2d",
                reason: "stride must be positive".into(),
            });
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ph, pw) = (h + 2 * attrs.padding, wd + 2 * attrs.padding);
        if kh > ph || kw > pw {
            return Err(mismatch("conv2d", &[xs, ws, bs]));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            oh: (ph - kh) / attrs.stride + 1,
            ow: (pw - kw) / attrs.stride + 1,
            stride: attrs.stride,
            pad: attrs.padding,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut cols = vec![T::zero(); n * rows * cols_n];
        let mut y = vec![T::zero(); n * o * cols_n];
        let in_stride = c * h * wd;
        for s in 0..n {
            let col = &mut cols[s * rows * cols_n..(s + 1) * rows * cols_n];
            im2col(&geom, &xv[s * in_stride..(s + 1) * in_stride], col);
            let out = &mut y[s * o * cols_n..(s + 1) * o * cols_n];
            for (oc, chunk) in out.chunks_mut(cols_n).enumerate() {
                chunk.fill(bv[oc]);
            }
            gemm_nn(o, rows, cols_n, wv, col, out);
        }
        let value = Tensor::new(vec![n, o, geom.oh, geom.ow], y)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Relu { x }, rg))
    }

    fn pool_geom(&self, op: &'static str, x: NodeId, attrs: Pool2dAttrs) -> Result<PoolGeom, KernelError> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(mismatch(op, &[xs]));
        }
        if attrs.size == 0 || attrs.stride == 0 || attrs.size > xs[2] || attrs.size > xs[3] {
            return Err(KernelError::InvalidAttr {
                op,
                reason: format!("window {attrs:?} does not fit input {xs:?}"),
            });
        }
        Ok(PoolGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            oh: (xs[2] - attrs.size) / attrs.stride + 1,
            ow: (xs[3] - attrs.size) / attrs.stride + 1,
            size: attrs.size,
            stride: attrs.stride,
        })
    }

    pub fn max_pool2d(&mut self, x: NodeId, attrs: Pool2dAttrs) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let g = self.pool_geom("max_pool2d", x, attrs)?;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
        let mut argmax = Vec::with_capacity(y.capacity());
        for plane in 0..g.n * g.c {
            let base = plane * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut best = base + oy * g.stride * g.w + ox * g.stride;
                    for dy in 0..g.size {
                        for dx in 0..g.size {
                            let idx = base + (oy * g.stride + dy) * g.w + ox * g.stride + dx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![g.n, g.c, g.oh, g.ow], y)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, attrs: Pool2dAttrs) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let g = self.pool_geom("avg_pool2d", x, attrs)?;
        let xv = self.value(x).data();
        let inv = T::one() / T::of_f64((g.size * g.size) as f64);
        let mut y = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
        for plane in 0..g.n * g.c {
            let base = plane * g.h * g.w;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for dy in 0..g.size {
                        let row = base + (oy * g.stride + dy) * g.w + ox * g.stride;
                        for dx in 0..g.size {
                            acc += xv[row + dx];
                        }
                    }
                    y.push(acc * inv);
                }
            }
        }
        let value = Tensor::new(vec![g.n, g.c, g.oh, g.ow], y)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool2d { x, geom: g }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let (rows, cols) = self.value(x).rows_cols();
        self.reshape(x, vec![rows, cols])
    }

    /// `y = x / ‖x‖₂` along the last axis.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let last = *src.shape().last().expect("non-empty shape");
        let eps = T::of_f64(NORM_EPS);
        let mut norms = Vec::with_capacity(src.len() / last);
        let mut y = Vec::with_capacity(src.len());
        for row in src.data().chunks(last) {
            let norm = crate::real::norm(row).max(eps);
            norms.push(norm);
            y.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(src.shape().to_vec(), y)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, norms }, rg))
    }

    /// Row-vs-matrix dot products: `y[m, j] = a[m]·b[j]` for `a: [M, d]`, `b: [n, d]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[a, b])?;
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(mismatch("matmul_nt", &[as_, bs]));
        }
        let (m, d, n) = (as_[0], as_[1], bs[0]);
        let mut y = vec![T::zero(); m * n];
        gemm_nt(m, d, n, self.value(a).data(), self.value(b).data(), &mut y);
        let value = Tensor::new(vec![m, n], y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulNt { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * factor).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    /// Log-softmax along the last axis, max-subtracted.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let last = *src.shape().last().expect("non-empty shape");
        let mut y = Vec::with_capacity(src.len());
        for row in src.data().chunks(last) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            y.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(src.shape().to_vec(), y)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x }, rg))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v.exp()).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Exp { x }, rg))
    }

    /// `−mean_m x[m, targets[m]]` for log-probabilities `x: [M, C]`.
    pub fn nll_mean(&mut self, x: NodeId, targets: Vec<usize>) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] != targets.len() {
            return Err(mismatch("nll_mean", &[xs, &[targets.len()]]));
        }
        let classes = xs[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(KernelError::InvalidAttr {
                op: "nll_mean",
                reason: format!("target {bad} out of range for {classes} classes"),
            });
        }
        let xv = self.value(x).data();
        let mut acc = T::zero();
        for (m, &t) in targets.iter().enumerate() {
            acc += xv[m * classes + t];
        }
        let value = Tensor::scalar(-acc / T::of_f64(targets.len() as f64));
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::NllMean { x, targets }, rg))
    }

    /// Gathers rows of `x` (first axis) in the given order; repeats allowed.
    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let (count, cols) = src.rows_cols();
        if rows.is_empty() || rows.iter().any(|&r| r >= count) {
            return Err(KernelError::InvalidAttr {
                op: "select_rows",
                reason: format!("row selection invalid for {count} rows"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            data.extend_from_slice(src.row(r));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SelectRows { x, rows }, rg))
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, sign: T) -> Result<(Tensor<T>, bool), KernelError> {
        self.check(&[a, b])?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, &[av.shape(), bv.shape()]));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + sign * y).collect();
        Ok((Tensor::new(av.shape().to_vec(), data)?, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (value, rg) = self.binary("add", a, b, T::one())?;
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let (value, rg) = self.binary("sub", a, b, -T::one())?;
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * v).collect())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Square { x }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[x])?;
        let src = self.value(x);
        let value = Tensor::scalar(src.data().iter().copied().sum::<T>() / T::of_f64(src.len() as f64));
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Mean { x }, rg))
    }

    /// Row-wise `KL(p ‖ q)` in nats for probability matrices `[R, C]`.
    ///
    /// Entries are clamped to `1e-12` inside the logs, so `0·log(0/q) = 0`.
    pub fn kl_rows(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, KernelError> {
        self.check(&[p, q])?;
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() || pv.shape().len() != 2 {
            return Err(mismatch("kl_rows", &[pv.shape(), qv.shape()]));
        }
        let (rows, cols) = pv.rows_cols();
        let eps = T::of_f64(NORM_EPS);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = T::zero();
            for c in 0..cols {
                let (pi, qi) = (pv.data()[r * cols + c], qv.data()[r * cols + c]);
                acc += pi * (pi.max(eps).ln() - qi.max(eps).ln());
            }
            out.push(acc);
        }
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(value, Op::KlRows { p, q }, rg))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, KernelError> {
        if self.consumed {
            return Err(KernelError::TapeConsumed);
        }
        self.check(&[loss])?;
        if !self.value(loss).is_scalar() {
            return Err(KernelError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf(_)) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Leaf::Param) = node.op {
                let data = grads[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                out.insert(NodeId(idx), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf(_) => {}
            Op::Affine { x, w, b } => {
                let (n, out) = (node.value.shape()[0], node.value.shape()[1]);
                let fan_in = self.shape(*x)[1];
                if let Some(gx) = self.slot(*x, grads) {
                    gemm_nn(n, out, fan_in, gy, self.value(*w).data(), gx);
                }
                if let Some(gw) = self.slot(*w, grads) {
                    gemm_tn(out, n, fan_in, gy, self.value(*x).data(), gw);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for row in gy.chunks(out) {
                        for (g, &v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (rows, cols_n, o) = (geom.col_rows(), geom.col_cols(), geom.o);
                let in_stride = geom.c * geom.h * geom.w;
                if let Some(gw) = self.slot(*w, grads) {
                    for s in 0..geom.n {
                        let g_out = &gy[s * o * cols_n..(s + 1) * o * cols_n];
                        let col = &cols[s * rows * cols_n..(s + 1) * rows * cols_n];
                        gemm_nt(o, cols_n, rows, g_out, col, gw);
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for s in 0..geom.n {
                        for (oc, gbv) in gb.iter_mut().enumerate() {
                            let start = (s * o + oc) * cols_n;
                            *gbv += gy[start..start + cols_n].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    let wv = self.value(*w).data();
                    let mut dcol = vec![T::zero(); rows * cols_n];
                    for s in 0..geom.n {
                        dcol.fill(T::zero());
                        let g_out = &gy[s * o * cols_n..(s + 1) * o * cols_n];
                        gemm_tn(rows, o, cols_n, wv, g_out, &mut dcol);
                        col2im(geom, &dcol, &mut gx[s * in_stride..(s + 1) * in_stride]);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for ((g, &v), &up) in gx.iter_mut().zip(xv).zip(gy) {
                        if v > T::zero() {
                            *g += up;
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (&src, &up) in argmax.iter().zip(gy) {
                        gx[src] += up;
                    }
                }
            }
            Op::AvgPool2d { x, geom: g } => {
                if let Some(gx) = self.slot(*x, grads) {
                    let inv = T::one() / T::of_f64((g.size * g.size) as f64);
                    let mut out = 0;
                    for plane in 0..g.n * g.c {
                        let base = plane * g.h * g.w;
                        for oy in 0..g.oh {
                            for ox in 0..g.ow {
                                let share = gy[out] * inv;
                                out += 1;
                                for dy in 0..g.size {
                                    let row = base + (oy * g.stride + dy) * g.w + ox * g.stride;
                                    for dx in 0..g.size {
                                        gx[row + dx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (g, &up) in gx.iter_mut().zip(gy) {
                        *g += up;
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let last = *node.value.shape().last().expect("non-empty shape");
                if let Some(gx) = self.slot(*x, grads) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let span = r * last..(r + 1) * last;
                        let (yr, gr) = (&y[span.clone()], &gy[span.clone()]);
                        let proj = crate::real::dot(yr, gr);
                        for ((g, &yv), &up) in gx[span].iter_mut().zip(yr).zip(gr) {
                            *g += (up - yv * proj) / norm;
                        }
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let d = self.shape(*a)[1];
                if let Some(ga) = self.slot(*a, grads) {
                    gemm_nn(m, n, d, gy, self.value(*b).data(), ga);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gemm_tn(n, m, d, gy, self.value(*a).data(), gb);
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (g, &up) in gx.iter_mut().zip(gy) {
                        *g += up * *factor;
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let last = *node.value.shape().last().expect("non-empty shape");
                if let Some(gx) = self.slot(*x, grads) {
                    for ((gxr, yr), gr) in gx.chunks_mut(last).zip(y.chunks(last)).zip(gy.chunks(last)) {
                        let total: T = gr.iter().copied().sum();
                        for ((g, &lp), &up) in gxr.iter_mut().zip(yr).zip(gr) {
                            *g += up - lp.exp() * total;
                        }
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for ((g, &yv), &up) in gx.iter_mut().zip(y).zip(gy) {
                        *g += up * yv;
                    }
                }
            }
            Op::NllMean { x, targets } => {
                let classes = self.shape(*x)[1];
                if let Some(gx) = self.slot(*x, grads) {
                    let share = gy[0] / T::of_f64(targets.len() as f64);
                    for (m, &t) in targets.iter().enumerate() {
                        gx[m * classes + t] -= share;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let cols = self.value(*x).rows_cols().1;
                if let Some(gx) = self.slot(*x, grads) {
                    for (out_row, &r) in rows.iter().enumerate() {
                        let src = &gy[out_row * cols..(out_row + 1) * cols];
                        for (g, &up) in gx[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *g += up;
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(*a, grads) {
                    for (g, &up) in ga.iter_mut().zip(gy) {
                        *g += up;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for (g, &up) in gb.iter_mut().zip(gy) {
                        *g += sign * up;
                    }
                }
            }
            Op::Square { x } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    let two = T::of_f64(2.0);
                    for ((g, &v), &up) in gx.iter_mut().zip(xv).zip(gy) {
                        *g += two * v * up;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for g in gx.iter_mut() {
                        *g += gy[0];
                    }
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = self.slot(*x, grads) {
                    let share = gy[0] / T::of_f64(gx.len() as f64);
                    for g in gx.iter_mut() {
                        *g += share;
                    }
                }
            }
            Op::KlRows { p, q } => {
                let cols = self.shape(*p)[1];
                let eps = T::of_f64(NORM_EPS);
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                if let Some(gp) = self.slot(*p, grads) {
                    for (i, g) in gp.iter_mut().enumerate() {
                        let (pi, qi) = (pv[i], qv[i]);
                        let mut d = pi.max(eps).ln() - qi.max(eps).ln();
                        if pi > eps {
                            d += T::one();
                        }
                        *g += gy[i / cols] * d;
                    }
                }
                if let Some(gq) = self.slot(*q, grads) {
                    for (i, g) in gq.iter_mut().enumerate() {
                        let qi = qv[i];
                        if qi > eps {
                            *g -= gy[i / cols] * pv[i] / qi;
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `id`, or `None` when it needs no gradient.
    fn slot<'g>(&self, id: NodeId, grads: &'g mut [Option<Vec<T>>]) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let cols_n = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let cols_n = g.col_cols();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
