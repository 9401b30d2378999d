//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order. Values are stored
//! on the tape and addressed through copyable [`Var`] handles. Calling
//! [`Tape::backward`] replays the local adjoint rules in reverse record order
//! and returns a [`Gradients`] table keyed by `Var`.
//!
//! ```
//! use metakernel::autodiff::Tape;
//! use metakernel::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{self, ConvGeometry, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Log,
    Sum,
    Mean,
    Reshape,
    MatMul,
    Linear,
    Conv2d,
    DepthwiseConv2d,
    GlobalAvgPool,
    ChannelAffine,
    Softmax,
    LogSoftmax,
    CrossEntropy,
    StraightThrough,
    CropKernel,
    Column,
    ExpandRows,
    WeightedFeatureSum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, k: Var, geom: ConvGeometry },
    GlobalAvgPool(Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Rc<[usize]> },
    StraightThrough { soft: Var },
    CropKernel { meta: Var, top: usize, left: usize },
    Column { x: Var, col: usize },
    ExpandRows(Var),
    WeightedFeatureSum { features: Vec<Var>, weights: Vec<Var> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Reshape(..) => OpKind::Reshape,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv { geom, .. } if geom.depthwise => OpKind::DepthwiseConv2d,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::GlobalAvgPool(..) => OpKind::GlobalAvgPool,
            Op::ChannelAffine { .. } => OpKind::ChannelAffine,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
            Op::CropKernel { .. } => OpKind::CropKernel,
            Op::Column { .. } => OpKind::Column,
            Op::ExpandRows(..) => OpKind::ExpandRows,
            Op::WeightedFeatureSum { .. } => OpKind::WeightedFeatureSum,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds another table from the same tape into this one.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() > other.grads.len() {
            return Err(Error::invalid("gradient tables come from different tapes"));
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b)?,
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grad-enabled leaf.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Kind of every record from `from` (inclusive) to the end of the tape.
    pub fn kinds_since(&self, from: usize) -> Vec<OpKind> {
        self.nodes.borrow()[from..].iter().map(|n| n.op.kind()).collect()
    }

    /// Shapes of every record from `from` (inclusive) to the end of the tape.
    pub fn shapes_since(&self, from: usize) -> Vec<(OpKind, Vec<usize>)> {
        self.nodes.borrow()[from..]
            .iter()
            .map(|n| (n.op.kind(), n.value.shape().to_vec()))
            .collect()
    }

    /// Whether each ReLU input entry on the tape is positive, in record order.
    /// The recorded function is smooth around a point where this stays fixed.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(nodes[a.0].value.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(&self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(&self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(&self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.record(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.record(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record(v, Op::Relu(a), &[a])
    }

    /// Natural logarithm; every input entry must be positive.
    pub fn log(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::invalid(format!("log of non-positive value {bad}")));
        }
        let v = x.map(f64::ln);
        Ok(self.record(v, Op::Log(a), &[a]))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.record(v, Op::Mean(a), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a), &[a]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let [m, k] = x.dims2()?;
        let [k2, n] = y.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {:?} x {:?}", x.shape(), y.shape())));
        }
        let v = Tensor::new(&[m, n], matmul(x.data(), y.data(), m, k, n))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x [B, in]`, `w [out, in]`, `b [out]` -> `x wᵀ + b`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [batch, inp] = xv.dims2()?;
        let [out, inp2] = wv.dims2()?;
        if inp != inp2 || bv.shape() != [out] {
            return Err(Error::shape(format!(
                "linear {:?} with weights {:?} and bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut y = vec![0.0; batch * out];
        for r in 0..batch {
            for o in 0..out {
                let mut acc = bv.data()[o];
                for i in 0..inp {
                    acc += xv.data()[r * inp + i] * wv.data()[o * inp + i];
                }
                y[r * out + o] = acc;
            }
        }
        let v = Tensor::new(&[batch, out], y)?;
        Ok(self.record(v, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn conv2d(&self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.conv(x, k, stride, padding, false)
    }

    pub fn depthwise_conv2d(&self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.conv(x, k, stride, padding, true)
    }

    fn conv(&self, x: Var, k: Var, stride: usize, padding: Padding, depthwise: bool) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let geom = ConvGeometry::new(xv.shape(), kv.shape(), stride, padding, depthwise)?;
        let v = conv::forward(&xv, &kv, &geom);
        Ok(self.record(v, Op::Conv { x, k, geom }, &[x, k]))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4()?;
        let hw = (h * w) as f64;
        let data = xv
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let v = Tensor::new(&[b, c], data)?;
        Ok(self.record(v, Op::GlobalAvgPool(x), &[x]))
    }

    /// Per-channel `x * scale[c] + shift[c]` on a `[B, C, H, W]` tensor.
    pub fn channel_affine(&self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, tv) = (self.value(x), self.value(scale), self.value(shift));
        let [_, c, h, w] = xv.dims4()?;
        if sv.shape() != [c] || tv.shape() != [c] {
            return Err(Error::shape(format!(
                "affine parameters {:?}/{:?} for {c} channels",
                sv.shape(),
                tv.shape()
            )));
        }
        let hw = h * w;
        let data = xv
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(p, plane)| {
                let ch = p % c;
                let (s, t) = (sv.data()[ch], tv.data()[ch]);
                plane.iter().map(move |&v| v * s + t)
            })
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        Ok(self.record(v, Op::ChannelAffine { x, scale, shift }, &[x, scale, shift]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let axis = last_axis(&xv)?;
        let v = xv.softmax(axis)?;
        Ok(self.record(v, Op::Softmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[last_axis(&xv)?];
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| {
                let lse = log_sum_exp(row);
                row.iter().map(move |&v| v - lse)
            })
            .collect();
        let v = Tensor::new(xv.shape(), data)?;
        Ok(self.record(v, Op::LogSoftmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [b, k] = lv.dims2()?;
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for batch of {b}", labels.len())));
        }
        let mut total = 0.0;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            if y >= k {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: k,
                });
            }
            total += log_sum_exp(row) - row[y];
        }
        let v = Tensor::scalar(total / b as f64);
        let labels: Rc<[usize]> = labels.into();
        Ok(self.record(v, Op::CrossEntropy { logits, labels }, &[logits]))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&self, soft: Var, hard: Tensor) -> Result<Var> {
        self.value(soft).expect_same_shape(&hard)?;
        Ok(self.record(hard, Op::StraightThrough { soft }, &[soft]))
    }

    /// Crops `[C, 1, Kh, Kw]` to the `[C, 1, h, w]` window at `(top, left)`.
    pub fn crop_kernel(&self, meta: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let mv = self.value(meta);
        let [c, one, kh, kw] = mv.dims4()?;
        if top + h > kh || left + w > kw {
            return Err(Error::shape(format!(
                "crop {h}x{w} at ({top},{left}) outside {kh}x{kw}"
            )));
        }
        let mut data = Vec::with_capacity(c * one * h * w);
        for plane in mv.data().chunks(kh * kw) {
            for i in 0..h {
                let row = (top + i) * kw + left;
                data.extend_from_slice(&plane[row..row + w]);
            }
        }
        let v = Tensor::new(&[c, one, h, w], data)?;
        Ok(self.record(v, Op::CropKernel { meta, top, left }, &[meta]))
    }

    /// Column `col` of an `[R, K]` tensor as `[R]`.
    pub fn column(&self, x: Var, col: usize) -> Result<Var> {
        let xv = self.value(x);
        let [_, k] = xv.dims2()?;
        if col >= k {
            return Err(Error::shape(format!("column {col} of {:?}", xv.shape())));
        }
        let data = xv.data().chunks(k).map(|row| row[col]).collect::<Vec<_>>();
        let v = Tensor::new(&[data.len()], data)?;
        Ok(self.record(v, Op::Column { x, col }, &[x]))
    }

    /// Repeats a `[1, N]` row into `[rows, N]`.
    pub fn expand_rows(&self, x: Var, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let [one, n] = xv.dims2()?;
        if one != 1 {
            return Err(Error::shape(format!("expand_rows needs one row, got {one}")));
        }
        let data = xv.data().repeat(rows);
        let v = Tensor::new(&[rows, n], data)?;
        Ok(self.record(v, Op::ExpandRows(x), &[x]))
    }

    /// `Σᵢ weights[i][c] · features[i][b, c, :, :]` in candidate order.
    pub fn weighted_feature_sum(&self, features: &[Var], weights: &[Var]) -> Result<Var> {
        if features.is_empty() || features.len() != weights.len() {
            return Err(Error::shape("weighted_feature_sum needs matching non-empty lists"));
        }
        let shape = self.shape(features[0]);
        let [_, c, h, w] = self.value(features[0]).dims4()?;
        let mut acc = Tensor::zeros(&shape);
        for (&f, &wt) in features.iter().zip(weights) {
            let (fv, wv) = (self.value(f), self.value(wt));
            if fv.shape() != shape.as_slice() || wv.shape() != [c] {
                return Err(Error::shape(format!(
                    "feature {:?} / weight {:?} vs {:?}",
                    fv.shape(),
                    wv.shape(),
                    shape
                )));
            }
            for (p, (dst, src)) in acc
                .data_mut()
                .chunks_mut(h * w)
                .zip(fv.data().chunks(h * w))
                .enumerate()
            {
                let s = wv.data()[p % c];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += s * x;
                }
            }
        }
        let mut inputs = features.to_vec();
        inputs.extend_from_slice(weights);
        Ok(self.record(
            acc,
            Op::WeightedFeatureSum {
                features: features.to_vec(),
                weights: weights.to_vec(),
            },
            &inputs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                shapes[loss.0]
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&shapes[loss.0], 1.0));
        let rg = |v: Var| nodes[v.0].requires_grad;

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut contribs: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    contribs.push((*a, g.clone()));
                    contribs.push((*b, g));
                }
                Op::Sub(a, b) => {
                    contribs.push((*b, g.scale(-1.0)));
                    contribs.push((*a, g));
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        contribs.push((*a, g.mul(val(*b))?));
                    }
                    if rg(*b) {
                        contribs.push((*b, g.mul(val(*a))?));
                    }
                }
                Op::Scale(a, s) => contribs.push((*a, g.scale(*s))),
                Op::AddScalar(a) => contribs.push((*a, g)),
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                    contribs.push((*a, d));
                }
                Op::Log(a) => contribs.push((*a, g.zip_map(val(*a), |gv, x| gv / x)?)),
                Op::Sum(a) => contribs.push((*a, Tensor::full(&shapes[a.0], g.item()))),
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len() as f64;
                    contribs.push((*a, Tensor::full(&shapes[a.0], g.item() / n)));
                }
                Op::Reshape(a) => contribs.push((*a, g.reshape(&shapes[a.0])?)),
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let [m, k] = x.dims2()?;
                    let [_, n] = y.dims2()?;
                    if rg(*a) {
                        let yt = transpose(y.data(), k, n);
                        contribs.push((*a, Tensor::new(&[m, k], matmul(g.data(), &yt, m, n, k))?));
                    }
                    if rg(*b) {
                        let xt = transpose(x.data(), m, k);
                        contribs.push((*b, Tensor::new(&[k, n], matmul(&xt, g.data(), k, m, n))?));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let [batch, inp] = xv.dims2()?;
                    let [out, _] = wv.dims2()?;
                    if rg(*x) {
                        contribs.push((*x, Tensor::new(&[batch, inp], matmul(g.data(), wv.data(), batch, out, inp))?));
                    }
                    if rg(*w) {
                        let gt = transpose(g.data(), batch, out);
                        contribs.push((*w, Tensor::new(&[out, inp], matmul(&gt, xv.data(), out, batch, inp))?));
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; out];
                        for row in g.data().chunks(out) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        contribs.push((*b, Tensor::new(&[out], gb)?));
                    }
                }
                Op::Conv { x, k, geom } => {
                    if rg(*x) {
                        contribs.push((*x, conv::backward_input(&g, val(*k), geom)));
                    }
                    if rg(*k) {
                        contribs.push((*k, conv::backward_kernel(&g, val(*x), geom)));
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let [_, _, h, w] = val(*x).dims4()?;
                    let hw = h * w;
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat(gv / hw as f64).take(hw))
                        .collect();
                    contribs.push((*x, Tensor::new(&shapes[x.0], data)?));
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = val(*x);
                    let [_, c, h, w] = xv.dims4()?;
                    let hw = h * w;
                    if rg(*x) {
                        let sv = val(*scale);
                        let data = g
                            .data()
                            .chunks(hw)
                            .enumerate()
                            .flat_map(|(p, plane)| {
                                let s = sv.data()[p % c];
                                plane.iter().map(move |&v| v * s)
                            })
                            .collect();
                        contribs.push((*x, Tensor::new(xv.shape(), data)?));
                    }
                    if rg(*scale) || rg(*shift) {
                        let mut gs = vec![0.0; c];
                        let mut gt = vec![0.0; c];
                        for (p, (gp, xp)) in g.data().chunks(hw).zip(xv.data().chunks(hw)).enumerate() {
                            let ch = p % c;
                            for (gv, xv) in gp.iter().zip(xp) {
                                gs[ch] += gv * xv;
                                gt[ch] += gv;
                            }
                        }
                        if rg(*scale) {
                            contribs.push((*scale, Tensor::new(&[c], gs)?));
                        }
                        if rg(*shift) {
                            contribs.push((*shift, Tensor::new(&[c], gt)?));
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let n = *shapes[x.0].last().expect("rank >= 1");
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    contribs.push((*x, Tensor::new(&shapes[x.0], d)?));
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let n = *shapes[x.0].last().expect("rank >= 1");
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                        let gs: f64 = gr.iter().sum();
                        d.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gs));
                    }
                    contribs.push((*x, Tensor::new(&shapes[x.0], d)?));
                }
                Op::CrossEntropy { logits, labels } => {
                    let lv = val(*logits);
                    let [b, k] = lv.dims2()?;
                    let scale = g.item() / b as f64;
                    let mut d = Vec::with_capacity(b * k);
                    for (row, &y) in lv.data().chunks(k).zip(labels.iter()) {
                        let lse = log_sum_exp(row);
                        d.extend(row.iter().enumerate().map(|(j, &v)| {
                            let p = (v - lse).exp();
                            scale * (p - if j == y { 1.0 } else { 0.0 })
                        }));
                    }
                    contribs.push((*logits, Tensor::new(&[b, k], d)?));
                }
                Op::StraightThrough { soft } => contribs.push((*soft, g)),
                Op::CropKernel { meta, top, left } => {
                    let [_, _, kh, kw] = val(*meta).dims4()?;
                    let [_, _, h, w] = g.dims4()?;
                    let mut d = Tensor::zeros(&shapes[meta.0]);
                    for (dst, src) in d.data_mut().chunks_mut(kh * kw).zip(g.data().chunks(h * w)) {
                        for i in 0..h {
                            let row = (top + i) * kw + left;
                            dst[row..row + w].copy_from_slice(&src[i * w..(i + 1) * w]);
                        }
                    }
                    contribs.push((*meta, d));
                }
                Op::Column { x, col } => {
                    let [_, k] = val(*x).dims2()?;
                    let mut d = Tensor::zeros(&shapes[x.0]);
                    for (row, gv) in d.data_mut().chunks_mut(k).zip(g.data()) {
                        row[*col] = *gv;
                    }
                    contribs.push((*x, d));
                }
                Op::ExpandRows(x) => {
                    let n = shapes[x.0][1];
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    contribs.push((*x, Tensor::new(&shapes[x.0], d)?));
                }
                Op::WeightedFeatureSum { features, weights } => {
                    let [_, c, h, w] = g.dims4()?;
                    let hw = h * w;
                    for (&f, &wt) in features.iter().zip(weights) {
                        let wv = val(wt);
                        if rg(f) {
                            let data = g
                                .data()
                                .chunks(hw)
                                .enumerate()
                                .flat_map(|(p, plane)| {
                                    let s = wv.data()[p % c];
                                    plane.iter().map(move |&v| v * s)
                                })
                                .collect();
                            contribs.push((f, Tensor::new(&shapes[f.0], data)?));
                        }
                        if rg(wt) {
                            let mut gw = vec![0.0; c];
                            for (p, (gp, fp)) in g.data().chunks(hw).zip(val(f).data().chunks(hw)).enumerate() {
                                gw[p % c] += gp.iter().zip(fp).map(|(a, b)| a * b).sum::<f64>();
                            }
                            contribs.push((wt, Tensor::new(&[c], gw)?));
                        }
                    }
                }
            }
            for (v, d) in contribs {
                if !rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d)?,
                    slot @ None => *slot = Some(d),
                }
            }
        }
        // Only leaves keep their gradient; interior adjoints were consumed above.
        grads.resize(nodes.len(), None);
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn last_axis(t: &Tensor) -> Result<usize> {
    if t.ndim() == 0 {
        return Err(Error::shape("softmax of a rank-0 tensor"));
    }
    Ok(t.ndim() - 1)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Largest `|analytic - central difference| / max(1, |central difference|)`
/// over all coordinates of `x`.
///
/// `f` builds a scalar from a leaf on a fresh tape; it is evaluated once for
/// the analytic gradient and twice per coordinate for the differences.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let tape = Tape::new();
    let leaf = tape.param(x.clone());
    let out = f(&tape, leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.param(t.clone());
        let out = f(&tape, leaf)?;
        Ok(tape.value(out).item())
    };
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((analytic.data()[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
