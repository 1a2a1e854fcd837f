//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Graph`]; node inputs always have
//! smaller indices, so the tape is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use attrfuse_core::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod conv;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use conv::ConvGeom;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Ties send the whole gradient to the left operand.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Square,
    Sqrt,
    Relu,
    Sigmoid,
    Tanh,
    Scale(f64),
    Shift(f64),
}

/// How an operand index is derived from an output index.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Direct,
    Scalar,
    /// `[N,1,H,W]` operand against a `[N,C,H,W]` output.
    Channel { channels: usize, plane: usize },
}

impl Bcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Direct => i,
            Bcast::Scalar => 0,
            Bcast::Channel { channels, plane } => (i / (channels * plane)) * plane + i % plane,
        }
    }

    fn resolve(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let numel = |s: &[usize]| s.iter().product::<usize>();
        if a == b {
            return Ok((a.to_vec(), Bcast::Direct, Bcast::Direct));
        }
        if numel(b) == 1 {
            return Ok((a.to_vec(), Bcast::Direct, Bcast::Scalar));
        }
        if numel(a) == 1 {
            return Ok((b.to_vec(), Bcast::Scalar, Bcast::Direct));
        }
        if a.len() == 4 && b.len() == 4 && a[0] == b[0] && a[2..] == b[2..] {
            let plane = a[2] * a[3];
            if b[1] == 1 {
                return Ok((a.to_vec(), Bcast::Direct, Bcast::Channel { channels: a[1], plane }));
            }
            if a[1] == 1 {
                return Ok((b.to_vec(), Bcast::Channel { channels: b[1], plane }, Bcast::Direct));
            }
        }
        Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryOp, lhs: Var, rhs: Var, lb: Bcast, rb: Bcast },
    Unary { kind: UnaryOp, input: Var },
    Reduce { input: Var, reduced: Vec<bool>, divisor: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Softmax { input: Var },
    LogSoftmax { input: Var },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated into `v` by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Clears gradients so `backward` may run again on the same tape.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- elementwise -----------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (&self.nodes[lhs.0].value, &self.nodes[rhs.0].value);
        let (shape, lb, rb) = Bcast::resolve(a.shape(), b.shape())?;
        let numel: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let (x, y) = (ad[lb.index(i)], bd[rb.index(i)]);
            out.push(match kind {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        return Err(Error::domain("division by zero"));
                    }
                    x / y
                }
                BinaryOp::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            });
        }
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary { kind, lhs, rhs, lb, rb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if kind == UnaryOp::Sqrt && x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::domain("sqrt of negative value"));
        }
        let f: fn(f64, f64) -> f64 = match kind {
            UnaryOp::Neg => |v, _| -v,
            UnaryOp::Abs => |v, _| v.abs(),
            UnaryOp::Square => |v, _| v * v,
            UnaryOp::Sqrt => |v, _| v.sqrt(),
            UnaryOp::Relu => |v, _| if v > 0.0 { v } else { 0.0 },
            UnaryOp::Sigmoid => |v, _| sigmoid(v),
            UnaryOp::Tanh => |v, _| v.tanh(),
            UnaryOp::Scale(_) => |v, s| v * s,
            UnaryOp::Shift(_) => |v, s| v + s,
        };
        let s = match kind {
            UnaryOp::Scale(s) | UnaryOp::Shift(s) => s,
            _ => 0.0,
        };
        let value = x.map(|v| f(v, s));
        let rg = self.rg(input);
        Ok(self.push(value, Op::Unary { kind, input }, rg))
    }

    fn unary_ok(&mut self, kind: UnaryOp, input: Var) -> Var {
        self.unary(kind, input).expect("infallible unary op")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary_ok(UnaryOp::Neg, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary_ok(UnaryOp::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary_ok(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary_ok(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_ok(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_ok(UnaryOp::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary_ok(UnaryOp::Scale(s), x)
    }

    pub fn shift(&mut self, x: Var, s: f64) -> Var {
        self.unary_ok(UnaryOp::Shift(s), x)
    }

    // ---- reductions ------------------------------------------------------

    fn reduce(&mut self, input: Var, axes: Option<&[usize]>, mean: bool) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let rank = x.rank();
        let mut reduced = vec![axes.is_none(); rank];
        if let Some(axes) = axes {
            if axes.is_empty() {
                return Err(Error::domain("reduction over an empty axis set"));
            }
            for &a in axes {
                if a >= rank || reduced[a] {
                    return Err(Error::shape(format!("invalid reduction axis {a} for rank {rank}")));
                }
                reduced[a] = true;
            }
        }
        let count: usize =
            x.shape().iter().zip(&reduced).filter(|(_, &r)| r).map(|(&d, _)| d).product();
        if count == 0 {
            return Err(Error::domain("reduction over zero elements"));
        }
        let out_shape: Vec<usize> =
            x.shape().iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
        let map = reduce_map(x.shape(), &reduced);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (v, &o) in x.data().iter().zip(&map) {
            out[o] += v;
        }
        let divisor = if mean { count as f64 } else { 1.0 };
        if mean {
            out.iter_mut().for_each(|v| *v /= divisor);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Reduce { input, reduced, divisor }, rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, None, false).expect("full sum of a non-empty tensor")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Some(axes), false)
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, Some(axes), true)
    }

    // ---- structural ------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat mismatch: {base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[input.0].value;
        let s = t.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) of axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { input, axis, start }, rg))
    }

    // ---- softmax ---------------------------------------------------------

    /// Softmax over axis 1, shifted by the per-position maximum.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let value = softmax_axis1(&self.nodes[input.0].value, false)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// `x - logsumexp(x)` over axis 1.
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let value = softmax_axis1(&self.nodes[input.0].value, true)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::LogSoftmax { input }, rg))
    }

    // ---- convolution -----------------------------------------------------

    /// NCHW cross-correlation with zero padding and an optional per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geom.cout,
                    self.shape(b)
                )));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.nodes[b.0].value.data()),
        );
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(geom.out_shape(), out)?, Op::Conv2d { input, kernel, bias, geom }, rg))
    }

    /// Convolution with padding `(k - 1) / 2`, preserving height and width.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let kh = self.shape(kernel).get(2).copied().unwrap_or(1);
        self.conv2d(input, kernel, bias, kh / 2)
    }

    /// Horizontal and vertical Sobel responses of a one-channel batch, zero padded.
    pub fn sobel(&mut self, input: Var) -> Result<(Var, Var)> {
        match self.shape(input) {
            [_, 1, _, _] => {}
            s => return Err(Error::shape(format!("sobel expects [N,1,H,W], got {s:?}"))),
        }
        let kx = self.constant(Tensor::new([1, 1, 3, 3], SOBEL_X.to_vec())?);
        let ky = self.constant(Tensor::new([1, 1, 3, 3], SOBEL_Y.to_vec())?);
        Ok((self.conv2d(input, kx, None, 1)?, self.conv2d(input, ky, None, 1)?))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a one-element `loss`, filling [`grad`](Self::grad)
    /// for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("loss does not belong to this graph"));
        }
        if self.backward_done {
            return Err(Error::contract("backward called twice without zero_grad"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, lhs, rhs, lb, rb } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                let (ad, bd) = (a.data(), b.data());
                if self.rg(*lhs) {
                    let mut ga = vec![0.0; a.numel()];
                    for (i, gi) in gd.iter().enumerate() {
                        let (ia, ib) = (lb.index(i), rb.index(i));
                        let d = match kind {
                            BinaryOp::Add | BinaryOp::Sub => 1.0,
                            BinaryOp::Mul => bd[ib],
                            BinaryOp::Div => 1.0 / bd[ib],
                            BinaryOp::Max => (ad[ia] >= bd[ib]) as u8 as f64,
                        };
                        ga[ia] += gi * d;
                    }
                    accumulate(grads, *lhs, a.shape(), ga);
                }
                if self.rg(*rhs) {
                    let mut gb = vec![0.0; b.numel()];
                    for (i, gi) in gd.iter().enumerate() {
                        let (ia, ib) = (lb.index(i), rb.index(i));
                        let d = match kind {
                            BinaryOp::Add => 1.0,
                            BinaryOp::Sub => -1.0,
                            BinaryOp::Mul => ad[ia],
                            BinaryOp::Div => -ad[ia] / (bd[ib] * bd[ib]),
                            BinaryOp::Max => (ad[ia] < bd[ib]) as u8 as f64,
                        };
                        gb[ib] += gi * d;
                    }
                    accumulate(grads, *rhs, b.shape(), gb);
                }
            }
            Op::Unary { kind, input } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let gx: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        gi * match kind {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Abs => sign(x[i]),
                            UnaryOp::Square => 2.0 * x[i],
                            UnaryOp::Sqrt => 0.5 / y[i],
                            UnaryOp::Relu => (x[i] > 0.0) as u8 as f64,
                            UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryOp::Tanh => 1.0 - y[i] * y[i],
                            UnaryOp::Scale(s) => *s,
                            UnaryOp::Shift(_) => 1.0,
                        }
                    })
                    .collect();
                accumulate(grads, *input, self.shape(*input), gx);
            }
            Op::Reduce { input, reduced, divisor } => {
                let shape = self.shape(*input);
                let map = reduce_map(shape, reduced);
                let gx = map.iter().map(|&o| gd[o] / divisor).collect();
                accumulate(grads, *input, shape, gx);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mut offset = 0;
                for v in inputs {
                    let s = self.shape(*v);
                    let chunk = s[*axis] * inner;
                    if self.rg(*v) {
                        let mut gx = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * out_shape[*axis] * inner + offset;
                            gx.extend_from_slice(&gd[base..base + chunk]);
                        }
                        accumulate(grads, *v, s, gx);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut gx = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let dst = (o * s[*axis] + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accumulate(grads, *input, s, gx);
            }
            Op::Softmax { input } => {
                let y = &node.value;
                let (outer, c, inner) = axis1_split(y.shape());
                let yd = y.data();
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for p in 0..inner {
                        let at = |k: usize| (o * c + k) * inner + p;
                        let dot: f64 = (0..c).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..c {
                            gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *input, y.shape(), gx);
            }
            Op::LogSoftmax { input } => {
                let y = &node.value;
                let (outer, c, inner) = axis1_split(y.shape());
                let yd = y.data();
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for p in 0..inner {
                        let at = |k: usize| (o * c + k) * inner + p;
                        let total: f64 = (0..c).map(|k| gd[at(k)]).sum();
                        for k in 0..c {
                            gx[at(k)] = gd[at(k)] - yd[at(k)].exp() * total;
                        }
                    }
                }
                accumulate(grads, *input, y.shape(), gx);
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                if self.rg(*input) {
                    let gx = conv::backward_input(geom, gd, self.value(*kernel).data());
                    accumulate(grads, *input, self.shape(*input), gx);
                }
                if self.rg(*kernel) {
                    let gk = conv::backward_kernel(geom, gd, self.value(*input).data());
                    accumulate(grads, *kernel, self.shape(*kernel), gk);
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    accumulate(grads, b, self.shape(b), conv::backward_bias(geom, gd));
                }
            }
        }
    }
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape mirrors value"));
        }
    }
}

/// Output flat index for every input flat index of a reduction.
fn reduce_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    if reduced.iter().all(|&r| r) {
        return vec![0; numel];
    }
    // Row-major strides of the output, zero on reduced axes.
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn axis1_split(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn softmax_axis1(x: &Tensor, log: bool) -> Result<Tensor> {
    if x.rank() < 2 || x.shape()[1] < 2 {
        return Err(Error::shape(format!("softmax needs at least 2 channels, got {:?}", x.shape())));
    }
    let (outer, c, inner) = axis1_split(x.shape());
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for p in 0..inner {
            let at = |k: usize| (o * c + k) * inner + p;
            let m = (0..c).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (xd[at(k)] - m).exp()).sum();
            let lz = z.ln();
            for k in 0..c {
                let shifted = xd[at(k)] - m;
                out[at(k)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
