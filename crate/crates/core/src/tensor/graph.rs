use std::borrow::Cow;
use std::collections::HashMap;

use super::{numel, strides, Result, Tensor, TensorError};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output spatial size is `ceil(input / stride)`; any odd padding goes
    /// to the bottom/right edge.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    SqDiff,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Constant(Tensor),
    Unary(Unary, NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId, Vec<usize>),
    Reshape(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    MaxPool2d {
        input: NodeId,
        size: usize,
        stride: usize,
    },
    MaxAxis(NodeId, usize),
    SumAxis(NodeId, usize),
    LogSumExp(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Gather(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Unary(u, _) => match u {
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Neg => "neg",
            },
            Op::Binary(b, _, _) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
                Binary::SqDiff => "squared_difference",
            },
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::MaxAxis(..) => "max_axis",
            Op::SumAxis(..) => "sum_axis",
            Op::LogSumExp(..) => "logsumexp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather(..) => "gather",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => Vec::new(),
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Transpose(a, _)
            | Op::Reshape(a)
            | Op::MaxAxis(a, _)
            | Op::SumAxis(a, _)
            | Op::LogSumExp(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gather(a, _) => vec![*a],
            Op::MaxPool2d { input, .. } | Op::Slice { input, .. } => vec![*input],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// A directed acyclic expression over tensor leaves.
///
/// Nodes can only reference earlier nodes, so insertion order is a valid
/// topological order. Every constructor validates input shapes.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Leaf values for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Bindings<'a> {
    values: HashMap<NodeId, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, leaf: NodeId, value: &'a Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Borrowed(value));
        self
    }

    pub fn bind_owned(&mut self, leaf: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(leaf, Cow::Owned(value));
        self
    }

    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.values.get(&leaf).map(|c| c.as_ref())
    }
}

/// Forward values of every node of a graph.
#[derive(Debug, Clone)]
pub struct Evaluation<'a> {
    values: Vec<Cow<'a, Tensor>>,
    // Flat input index chosen by each output element of max-type nodes.
    winners: Vec<Option<Vec<usize>>>,
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    /// Arg-max input positions recorded by a `max_axis` or `maxpool2d` node.
    pub fn winners(&self, node: NodeId) -> Option<&[usize]> {
        self.winners[node.0].as_deref()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed in the coordinates of `out`, zero where the
/// dimension is broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the
/// broadcast output.
fn visit_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let (na, nb) = (numel(a), numel(b));
    let suffix = |s: &[usize]| s.len() <= out.len() && s == &out[out.len() - s.len()..];
    if a == out && suffix(b) {
        for i in 0..n {
            f(i, i, i % nb);
        }
        return;
    }
    if b == out && suffix(a) {
        for i in 0..n {
            f(i, i % na, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if size < k {
                None
            } else {
                Some(((size - k) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            Some((out, total / 2))
        }
    }
}

/// Range of output positions `o` with `0 <= o*stride + k - pad < size`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= size - 1
    let hi = if size + pad < k + 1 {
        0
    } else {
        ((size + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
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

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    /// Placeholder whose value is supplied through [`Bindings`].
    pub fn leaf(&mut self, shape: &[usize], requires_grad: bool) -> Result<NodeId> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        Ok(self.push(Op::Leaf { requires_grad }, shape.to_vec()))
    }

    pub fn param(&mut self, shape: &[usize]) -> Result<NodeId> {
        self.leaf(shape, true)
    }

    pub fn input(&mut self, shape: &[usize]) -> Result<NodeId> {
        self.leaf(shape, false)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { requires_grad: true }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn unary(&mut self, u: Unary, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Unary(u, x), shape)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Log, x)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), shape)
    }

    pub fn offset(&mut self, x: NodeId, delta: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Offset(x, delta), shape)
    }

    fn binary(&mut self, b: Binary, x: NodeId, y: NodeId) -> Result<NodeId> {
        let shape = broadcast_shape(self.shape(x), self.shape(y)).ok_or_else(|| {
            shape_err(
                "broadcast",
                format!("{:?} vs {:?}", self.shape(x), self.shape(y)),
            )
        })?;
        Ok(self.push(Op::Binary(b, x, y), shape))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, x, y)
    }

    pub fn sub(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, x, y)
    }

    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, x, y)
    }

    pub fn div(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, x, y)
    }

    /// Elementwise `(x - y)^2`.
    pub fn squared_difference(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        self.binary(Binary::SqDiff, x, y)
    }

    pub fn matmul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let (a, b) = (self.shape(x), self.shape(y));
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", format!("{a:?} @ {b:?}")));
        }
        let shape = vec![a[0], b[1]];
        Ok(self.push(Op::MatMul(x, y), shape))
    }

    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(shape_err("transpose", format!("perm {perm:?} for {s:?}")));
        }
        let shape = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Transpose(x, perm.to_vec()), shape))
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&mut self, x: NodeId) -> Result<NodeId> {
        self.transpose(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != numel(self.shape(x)) || shape.contains(&0) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec()))
    }

    /// 2-D convolution of `[B, C, H, W]` input with `[O, C, KH, KW]` weights.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (x, w) = (self.shape(input), self.shape(weight));
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("input {x:?}, weight {w:?}, stride {stride}"),
            ));
        }
        let (oh, pad_top) = conv_out(x[2], w[2], stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {w:?} larger than {x:?}")))?;
        let (ow, pad_left) = conv_out(x[3], w[3], stride, padding)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {w:?} larger than {x:?}")))?;
        let shape = vec![x[0], w[0], oh, ow];
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                pad_top,
                pad_left,
            },
            shape,
        ))
    }

    /// Max pooling over `size x size` windows of a `[B, C, H, W]` input,
    /// without padding.
    pub fn maxpool2d(&mut self, input: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let x = self.shape(input);
        if x.len() != 4 || size == 0 || stride == 0 || x[2] < size || x[3] < size {
            return Err(shape_err(
                "maxpool2d",
                format!("input {x:?}, size {size}, stride {stride}"),
            ));
        }
        let shape = vec![x[0], x[1], (x[2] - size) / stride + 1, (x[3] - size) / stride + 1];
        Ok(self.push(Op::MaxPool2d { input, size, stride }, shape))
    }

    fn check_axis(&self, op: &'static str, x: NodeId, axis: usize) -> Result<Vec<usize>> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(shape_err(op, format!("axis {axis} for {s:?}")));
        }
        let mut out = s.to_vec();
        out.remove(axis);
        Ok(out)
    }

    /// Maximum along `axis`, which is removed. Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.check_axis("max_axis", x, axis)?;
        Ok(self.push(Op::MaxAxis(x, axis), shape))
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.check_axis("sum_axis", x, axis)?;
        Ok(self.push(Op::SumAxis(x, axis), shape))
    }

    pub fn logsumexp(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.check_axis("logsumexp", x, axis)?;
        Ok(self.push(Op::LogSumExp(x, axis), shape))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), Vec::new())
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), Vec::new())
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = xs
            .first()
            .map(|&x| self.shape(x).to_vec())
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(Op::Concat(xs.to_vec(), axis), shape))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        Ok(self.push(
            Op::Slice {
                input: x,
                axis,
                start,
            },
            shape,
        ))
    }

    /// Picks elements of the flattened input into a vector.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let n = numel(self.shape(x));
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(shape_err("gather", format!("indices out of range 0..{n}")));
        }
        Ok(self.push(Op::Gather(x, indices.to_vec()), vec![indices.len()]))
    }

    /// Forward pass. Identical bindings always produce bit-identical values.
    pub fn evaluate<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut winners = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let (value, win) = match &node.op {
                Op::Leaf { .. } => {
                    let v = bindings
                        .values
                        .get(&NodeId(i))
                        .ok_or(TensorError::Unbound(i))?;
                    if v.shape() != node.shape.as_slice() {
                        return Err(shape_err(
                            "bind",
                            format!("leaf {i} expects {:?}, got {:?}", node.shape, v.shape()),
                        ));
                    }
                    if !v.is_finite() {
                        return Err(TensorError::NonFiniteNode { node: i, op: "leaf" });
                    }
                    (v.clone(), None)
                }
                Op::Constant(t) => (Cow::Borrowed(t), None),
                op => {
                    let (t, win) = self.forward(op, &node.shape, &values);
                    if !t.is_finite() {
                        return Err(TensorError::NonFiniteNode {
                            node: i,
                            op: op.name(),
                        });
                    }
                    (Cow::Owned(t), win)
                }
            };
            values.push(value);
            winners.push(win);
        }
        Ok(Evaluation { values, winners })
    }

    fn forward(
        &self,
        op: &Op,
        shape: &[usize],
        values: &[Cow<'_, Tensor>],
    ) -> (Tensor, Option<Vec<usize>>) {
        let v = |id: &NodeId| values[id.0].as_ref();
        let n = numel(shape);
        let mut win = None;
        let data = match op {
            Op::Leaf { .. } | Op::Constant(_) => unreachable!(),
            Op::Unary(u, x) => {
                let xs = v(x).data();
                match u {
                    Unary::Relu => xs.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect(),
                    Unary::Sigmoid => xs.iter().map(|&a| sigmoid(a)).collect(),
                    Unary::Tanh => xs.iter().map(|a| a.tanh()).collect(),
                    Unary::Exp => xs.iter().map(|a| a.exp()).collect(),
                    Unary::Log => xs.iter().map(|a| a.ln()).collect(),
                    Unary::Neg => xs.iter().map(|a| -a).collect(),
                }
            }
            Op::Binary(b, x, y) => {
                let (xt, yt) = (v(x), v(y));
                let (xs, ys) = (xt.data(), yt.data());
                let mut out = vec![0.0; n];
                let f: fn(f64, f64) -> f64 = match b {
                    Binary::Add => |a, b| a + b,
                    Binary::Sub => |a, b| a - b,
                    Binary::Mul => |a, b| a * b,
                    Binary::Div => |a, b| a / b,
                    Binary::SqDiff => |a, b| (a - b) * (a - b),
                };
                visit_broadcast(shape, xt.shape(), yt.shape(), |o, i, j| {
                    out[o] = f(xs[i], ys[j]);
                });
                out
            }
            Op::Scale(x, c) => v(x).data().iter().map(|a| a * c).collect(),
            Op::Offset(x, c) => v(x).data().iter().map(|a| a + c).collect(),
            Op::MatMul(x, y) => {
                let (a, b) = (v(x), v(y));
                let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * p];
                matmul_into(a.data(), b.data(), &mut out, m, k, p);
                out
            }
            Op::Transpose(x, perm) => {
                let xt = v(x);
                let mut out = vec![0.0; n];
                visit_transpose(xt.shape(), perm, |o, i| out[o] = xt.data()[i]);
                out
            }
            Op::Reshape(x) => v(x).data().to_vec(),
            Op::Conv2d {
                input,
                weight,
                stride,
                pad_top,
                pad_left,
            } => {
                let geo = ConvGeometry::new(v(input).shape(), v(weight).shape(), shape, *stride, *pad_top, *pad_left);
                let mut out = vec![0.0; n];
                geo.forward(v(input).data(), v(weight).data(), &mut out);
                out
            }
            Op::MaxPool2d {
                input,
                size,
                stride,
            } => {
                let xt = v(input);
                let (h, w) = (xt.shape()[2], xt.shape()[3]);
                let (oh, ow) = (shape[2], shape[3]);
                let planes = shape[0] * shape[1];
                let xs = xt.data();
                let mut out = vec![0.0; n];
                let mut idx = vec![0usize; n];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = usize::MAX;
                            for ky in 0..*size {
                                for kx in 0..*size {
                                    let i = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                                    if best == usize::MAX || xs[i] > xs[best] {
                                        best = i;
                                    }
                                }
                            }
                            let o = p * oh * ow + oy * ow + ox;
                            out[o] = xs[best];
                            idx[o] = best;
                        }
                    }
                }
                win = Some(idx);
                out
            }
            Op::MaxAxis(x, axis) => {
                let xt = v(x);
                let (outer, len, inner) = split_axis(xt.shape(), *axis);
                let xs = xt.data();
                let mut out = vec![0.0; outer * inner];
                let mut idx = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for k in 1..len {
                            let j = (o * len + k) * inner + i;
                            if xs[j] > xs[best] {
                                best = j;
                            }
                        }
                        out[o * inner + i] = xs[best];
                        idx[o * inner + i] = best;
                    }
                }
                win = Some(idx);
                out
            }
            Op::SumAxis(x, axis) => {
                let xt = v(x);
                let (outer, len, inner) = split_axis(xt.shape(), *axis);
                let xs = xt.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let row = &xs[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
                out
            }
            Op::LogSumExp(x, axis) => {
                let xt = v(x);
                let (outer, len, inner) = split_axis(xt.shape(), *axis);
                let xs = xt.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| xs[(o * len + k) * inner + i];
                        let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = (0..len).map(|k| (at(k) - m).exp()).sum();
                        out[o * inner + i] = m + s.ln();
                    }
                }
                out
            }
            Op::Sum(x) => vec![v(x).data().iter().sum()],
            Op::Mean(x) => {
                let xs = v(x).data();
                vec![xs.iter().sum::<f64>() / xs.len() as f64]
            }
            Op::Concat(xs, axis) => {
                let outer = numel(&shape[..*axis]);
                let mut out = Vec::with_capacity(n);
                for o in 0..outer {
                    for x in xs {
                        let t = v(x);
                        let chunk = numel(&t.shape()[*axis..]);
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let xt = v(input);
                let (outer, len, inner) = split_axis(xt.shape(), *axis);
                let take = shape[*axis];
                let mut out = Vec::with_capacity(n);
                for o in 0..outer {
                    let from = (o * len + start) * inner;
                    out.extend_from_slice(&xt.data()[from..from + take * inner]);
                }
                out
            }
            Op::Gather(x, idx) => {
                let xs = v(x).data();
                idx.iter().map(|&i| xs[i]).collect()
            }
        };
        (Tensor::from_parts(shape.to_vec(), data), win)
    }

    /// Gradient of a scalar `root` with respect to each of `wrt`.
    pub fn gradient(
        &self,
        eval: &Evaluation<'_>,
        root: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        let shape = self.shape(root);
        if !shape.is_empty() {
            return Err(TensorError::NonScalarRoot(shape.to_vec()));
        }
        self.backward(eval, root, Tensor::from_parts(Vec::new(), vec![1.0]), wrt)
    }

    /// Evaluates and differentiates in one call.
    pub fn value_and_gradient<'a>(
        &'a self,
        bindings: &Bindings<'a>,
        root: NodeId,
        wrt: &[NodeId],
    ) -> Result<(f64, Vec<Tensor>)> {
        let eval = self.evaluate(bindings)?;
        let grads = self.gradient(&eval, root, wrt)?;
        Ok((eval.value(root).item(), grads))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `root`) back
    /// to the requested nodes.
    pub fn backward(
        &self,
        eval: &Evaluation<'_>,
        root: NodeId,
        seed: Tensor,
        wrt: &[NodeId],
    ) -> Result<Vec<Tensor>> {
        if seed.shape() != self.shape(root) {
            return Err(shape_err(
                "backward",
                format!("seed {:?} for root {:?}", seed.shape(), self.shape(root)),
            ));
        }
        let mut needs = vec![false; root.0 + 1];
        for w in wrt {
            if w.0 <= root.0 {
                needs[w.0] = true;
            }
        }
        for i in 0..=root.0 {
            if !needs[i] {
                needs[i] = self.nodes[i].op.inputs().iter().any(|x| needs[x.0]);
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if needs[root.0] {
            grads[root.0] = Some(seed.into_data());
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            // Keep requested nodes' gradients around; everything else is
            // released once propagated.
            if wrt.contains(&NodeId(i)) {
                grads[i] = Some(g.clone());
            }
            self.propagate(i, &g, eval, &needs, &mut grads);
        }
        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.shape(*w).to_vec();
                match grads.get(w.0).and_then(|g| g.clone()) {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        eval: &Evaluation<'_>,
        needs: &[bool],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let node = &self.nodes[i];
        let val = |id: &NodeId| eval.values[id.0].as_ref();
        let out = eval.values[i].as_ref();
        let acc = |id: NodeId, grads: &mut [Option<Vec<f64>>]| -> Option<Vec<f64>> {
            if !needs[id.0] {
                return None;
            }
            Some(
                grads[id.0]
                    .take()
                    .unwrap_or_else(|| vec![0.0; numel(&self.nodes[id.0].shape)]),
            )
        };
        match &node.op {
            Op::Leaf { .. } | Op::Constant(_) => {}
            Op::Unary(u, x) => {
                if let Some(mut gx) = acc(*x, grads) {
                    let xs = val(x).data();
                    let ys = out.data();
                    for k in 0..g.len() {
                        gx[k] += match u {
                            Unary::Relu => {
                                if xs[k] > 0.0 {
                                    g[k]
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => g[k] * ys[k] * (1.0 - ys[k]),
                            Unary::Tanh => g[k] * (1.0 - ys[k] * ys[k]),
                            Unary::Exp => g[k] * ys[k],
                            Unary::Log => g[k] / xs[k],
                            Unary::Neg => -g[k],
                        };
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Binary(b, x, y) => {
                let (xt, yt) = (val(x), val(y));
                let (xs, ys) = (xt.data(), yt.data());
                let gx = acc(*x, grads);
                let gy = if x == y { None } else { acc(*y, grads) };
                let same = x == y;
                let (mut gx, mut gy) = (gx, gy);
                visit_broadcast(&node.shape, xt.shape(), yt.shape(), |o, a, c| {
                    let (da, db) = match b {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (ys[c], xs[a]),
                        Binary::Div => (1.0 / ys[c], -xs[a] / (ys[c] * ys[c])),
                        Binary::SqDiff => {
                            let d = 2.0 * (xs[a] - ys[c]);
                            (d, -d)
                        }
                    };
                    if let Some(gx) = gx.as_mut() {
                        gx[a] += g[o] * da;
                        if same {
                            gx[c] += g[o] * db;
                        }
                    }
                    if let Some(gy) = gy.as_mut() {
                        gy[c] += g[o] * db;
                    }
                });
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gy) = gy {
                    grads[y.0] = Some(gy);
                }
            }
            Op::Scale(x, c) => {
                if let Some(mut gx) = acc(*x, grads) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b * c;
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Offset(x, _) | Op::Reshape(x) => {
                if let Some(mut gx) = acc(*x, grads) {
                    for (a, b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::MatMul(x, y) => {
                let (a, b) = (val(x), val(y));
                let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if let Some(mut gx) = acc(*x, grads) {
                    // dA = G @ B^T
                    let bs = b.data();
                    for r in 0..m {
                        let grow = &g[r * p..(r + 1) * p];
                        for c in 0..k {
                            let brow = &bs[c * p..(c + 1) * p];
                            gx[r * k + c] += dot(grow, brow);
                        }
                    }
                    grads[x.0] = Some(gx);
                }
                if let Some(mut gy) = acc(*y, grads) {
                    // dB = A^T @ G
                    let as_ = a.data();
                    for r in 0..m {
                        let grow = &g[r * p..(r + 1) * p];
                        for c in 0..k {
                            let s = as_[r * k + c];
                            if s != 0.0 {
                                for (d, gv) in gy[c * p..(c + 1) * p].iter_mut().zip(grow) {
                                    *d += s * gv;
                                }
                            }
                        }
                    }
                    grads[y.0] = Some(gy);
                }
            }
            Op::Transpose(x, perm) => {
                if let Some(mut gx) = acc(*x, grads) {
                    visit_transpose(val(x).shape(), perm, |o, i| gx[i] += g[o]);
                    grads[x.0] = Some(gx);
                }
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad_top,
                pad_left,
            } => {
                let (xt, wt) = (val(input), val(weight));
                let geo = ConvGeometry::new(xt.shape(), wt.shape(), &node.shape, *stride, *pad_top, *pad_left);
                let gi = acc(*input, grads);
                let gw = acc(*weight, grads);
                let (gi, gw) = geo.backward(xt.data(), wt.data(), g, gi, gw);
                if let Some(gi) = gi {
                    grads[input.0] = Some(gi);
                }
                if let Some(gw) = gw {
                    grads[weight.0] = Some(gw);
                }
            }
            Op::MaxPool2d { input: x, .. } | Op::MaxAxis(x, _) => {
                if let Some(mut gx) = acc(*x, grads) {
                    let win = eval.winners[i].as_ref().expect("max node records winners");
                    for (o, &w) in win.iter().enumerate() {
                        gx[w] += g[o];
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::SumAxis(x, axis) => {
                if let Some(mut gx) = acc(*x, grads) {
                    let (outer, len, inner) = split_axis(val(x).shape(), *axis);
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            for j in 0..inner {
                                gx[base + j] += g[o * inner + j];
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::LogSumExp(x, axis) => {
                if let Some(mut gx) = acc(*x, grads) {
                    let xt = val(x);
                    let (outer, len, inner) = split_axis(xt.shape(), *axis);
                    let (xs, ys) = (xt.data(), out.data());
                    for o in 0..outer {
                        for k in 0..len {
                            for j in 0..inner {
                                let q = o * inner + j;
                                let idx = (o * len + k) * inner + j;
                                gx[idx] += g[q] * (xs[idx] - ys[q]).exp();
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if let Some(mut gx) = acc(*x, grads) {
                    let s = if matches!(node.op, Op::Mean(_)) {
                        g[0] / gx.len() as f64
                    } else {
                        g[0]
                    };
                    for a in gx.iter_mut() {
                        *a += s;
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Concat(xs, axis) => {
                let outer = numel(&node.shape[..*axis]);
                let total = numel(&node.shape[*axis..]);
                let mut offset = 0;
                for x in xs {
                    let chunk = numel(&val(x).shape()[*axis..]);
                    if let Some(mut gx) = acc(*x, grads) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (a, b) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                        grads[x.0] = Some(gx);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                if let Some(mut gx) = acc(*input, grads) {
                    let (outer, len, inner) = split_axis(val(input).shape(), *axis);
                    let take = node.shape[*axis] * inner;
                    for o in 0..outer {
                        let from = (o * len + start) * inner;
                        for (a, b) in gx[from..from + take].iter_mut().zip(&g[o * take..(o + 1) * take]) {
                            *a += b;
                        }
                    }
                    grads[input.0] = Some(gx);
                }
            }
            Op::Gather(x, idx) => {
                if let Some(mut gx) = acc(*x, grads) {
                    for (o, &k) in idx.iter().enumerate() {
                        gx[k] += g[o];
                    }
                    grads[x.0] = Some(gx);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for r in 0..m {
        let orow = &mut out[r * p..(r + 1) * p];
        for c in 0..k {
            let s = a[r * k + c];
            if s == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[c * p..(c + 1) * p]) {
                *o += s * bv;
            }
        }
    }
}

/// Calls `f(out_index, in_index)` for the permutation `perm` of `in_shape`.
fn visit_transpose(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(in_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(
        x: &[usize],
        w: &[usize],
        out: &[usize],
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    ) -> Self {
        Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            kh: w[2],
            kw: w[3],
            oh: out[2],
            ow: out[3],
            stride,
            pad_top,
            pad_left,
        }
    }

    /// Visits `(in_offset, out_offset, count, weight_index, in_plane, out_plane)`
    /// row segments where the kernel tap overlaps the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let s = self.stride;
        for b in 0..self.batch {
            for o in 0..self.cout {
                let out_plane = (b * self.cout + o) * self.oh * self.ow;
                for c in 0..self.cin {
                    let in_plane = (b * self.cin + c) * self.h * self.w;
                    for ky in 0..self.kh {
                        let (y0, y1) = valid_range(self.oh, self.h, ky, s, self.pad_top);
                        for kx in 0..self.kw {
                            let (x0, x1) = valid_range(self.ow, self.w, kx, s, self.pad_left);
                            if x0 >= x1 {
                                continue;
                            }
                            let widx = ((o * self.cin + c) * self.kh + ky) * self.kw + kx;
                            for oy in y0..y1 {
                                let iy = oy * s + ky - self.pad_top;
                                let ix0 = x0 * s + kx - self.pad_left;
                                f(
                                    in_plane + iy * self.w + ix0,
                                    out_plane + oy * self.ow + x0,
                                    x1 - x0,
                                    widx,
                                    in_plane,
                                    out_plane,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        let s = self.stride;
        self.for_each_tap(|xi, oi, count, widx, _, _| {
            let wv = w[widx];
            if wv == 0.0 {
                return;
            }
            for t in 0..count {
                out[oi + t] += wv * x[xi + t * s];
            }
        });
    }

    fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        mut gi: Option<Vec<f64>>,
        mut gw: Option<Vec<f64>>,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let s = self.stride;
        self.for_each_tap(|xi, oi, count, widx, _, _| {
            if let Some(gi) = gi.as_mut() {
                let wv = w[widx];
                for t in 0..count {
                    gi[xi + t * s] += wv * g[oi + t];
                }
            }
            if let Some(gw) = gw.as_mut() {
                let mut acc = 0.0;
                for t in 0..count {
                    acc += x[xi + t * s] * g[oi + t];
                }
                gw[widx] += acc;
            }
        });
        (gi, gw)
    }
}
