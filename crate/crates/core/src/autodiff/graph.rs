use super::kernels::{broadcast_shape, broadcast_strides, for_each_bcast, for_each_bcast2, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation kinds with a built-in forward and backward rule.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m, k] x [k, n]`.
    MatMul,
    /// `x W + b` with `b` broadcast over rows.
    Linear,
    Sum,
    Mean,
    SumAxis(usize),
    Exp,
    Log,
    Relu,
    Softplus,
    Sigmoid,
    Tanh,
    Sqrt,
    Square,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Broadcast(Vec<usize>),
    Reshape(Vec<usize>),
    GatherRows(Vec<usize>),
    Softmax(usize),
    /// Euclidean norm over the last axis.
    RowNorm,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Relu => "relu",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Clamp(..) => "clamp",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Broadcast(_) => "broadcast",
            OpKind::Reshape(_) => "reshape",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Softmax(_) => "softmax",
            OpKind::RowNorm => "row_norm",
        }
    }
}

/// A differentiable operation whose forward pass is computed by the caller.
///
/// Used for fused kernels (grid interpolation, compositing, ray warping) that
/// would be wasteful to express as chains of elementwise ops.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one entry per input, `None` where
    /// `needs_grad[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Constant,
    Kind(OpKind),
    Custom(Box<dyn Function>),
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Var>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a computation. Inputs always precede consumers, so
/// node order is a topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, Vec::new(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, Vec::new(), false)
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

    fn push_raw(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, kind: OpKind, inputs: Vec<Var>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, Op::Kind(kind), inputs, rg)
    }

    /// Record a caller-evaluated operation.
    pub fn custom(&mut self, op: Box<dyn Function>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(output, Op::Custom(op), inputs.to_vec(), rg)
    }

    /// Generic dispatch over the built-in operation kinds.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            OpKind::Linear => 3,
            OpKind::Concat(_) => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::invalid(format!(
                "{} takes {arity} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
        let value = self.eval(&kind, inputs)?;
        Ok(self.push(value, kind, inputs.to_vec()))
    }

    fn eval(&self, kind: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let x = self.value(inputs[0]);
        let unary = |f: &dyn Fn(f64) -> f64| {
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let y = self.value(inputs[1]);
                binary(kind, x, y)
            }
            OpKind::MatMul => {
                let y = self.value(inputs[1]);
                if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
                    return Err(shape_err("matmul", x.shape(), y.shape()));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, x.data(), (k, 1), y.data(), (n, 1), &mut out, 0.0);
                Tensor::new(vec![m, n], out)
            }
            OpKind::Linear => {
                let w = self.value(inputs[1]);
                let b = self.value(inputs[2]);
                if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
                    return Err(shape_err("linear", x.shape(), w.shape()));
                }
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if b.numel() != n {
                    return Err(shape_err("linear", w.shape(), b.shape()));
                }
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend_from_slice(b.data());
                }
                gemm(m, k, n, x.data(), (k, 1), w.data(), (n, 1), &mut out, 1.0);
                Tensor::new(vec![m, n], out)
            }
            OpKind::Sum => Ok(Tensor::scalar(x.data().iter().sum())),
            OpKind::Mean => {
                if x.numel() == 0 {
                    return Err(Error::invalid("mean of an empty tensor"));
                }
                Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
            }
            OpKind::SumAxis(axis) => {
                let axis = *axis;
                if axis >= x.shape().len() {
                    return Err(shape_err("sum_axis", x.shape(), &[axis]));
                }
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let d = x.data();
                for o in 0..outer {
                    for a in 0..len {
                        let src = &d[(o * len + a) * inner..(o * len + a + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                let mut shape = x.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)
            }
            OpKind::Exp => unary(&f64::exp),
            OpKind::Log => unary(&f64::ln),
            OpKind::Relu => unary(&|v| v.max(0.0)),
            OpKind::Softplus => unary(&softplus),
            OpKind::Sigmoid => unary(&sigmoid),
            OpKind::Tanh => unary(&f64::tanh),
            OpKind::Sqrt => unary(&f64::sqrt),
            OpKind::Square => unary(&|v| v * v),
            OpKind::Neg => unary(&|v| -v),
            OpKind::Scale(c) => unary(&|v| v * c),
            OpKind::AddScalar(c) => unary(&|v| v + c),
            OpKind::Clamp(lo, hi) => {
                if lo > hi {
                    return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
                }
                unary(&|v| v.clamp(*lo, *hi))
            }
            OpKind::Concat(axis) => {
                let axis = *axis;
                let first = x.shape();
                if axis >= first.len() {
                    return Err(shape_err("concat", first, &[axis]));
                }
                let mut total = 0;
                for v in inputs {
                    let s = self.shape(*v);
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(first)
                            .enumerate()
                            .all(|(i, (a, b))| i == axis || a == b);
                    if !compatible {
                        return Err(shape_err("concat", first, s));
                    }
                    total += s[axis];
                }
                let (outer, _, inner) = axis_split(first, axis);
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for v in inputs {
                        let t = self.value(*v);
                        let chunk = t.shape()[axis] * inner;
                        out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first.to_vec();
                shape[axis] = total;
                Tensor::new(shape, out)
            }
            OpKind::Slice { axis, start, end } => {
                let (axis, start, end) = (*axis, *start, *end);
                if axis >= x.shape().len() || start >= end || end > x.shape()[axis] {
                    return Err(shape_err("slice", x.shape(), &[axis, start, end]));
                }
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let mut out = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    out.extend_from_slice(
                        &x.data()[(o * len + start) * inner..(o * len + end) * inner],
                    );
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = end - start;
                Tensor::new(shape, out)
            }
            OpKind::Broadcast(shape) => {
                match broadcast_shape(x.shape(), shape) {
                    Some(s) if s == *shape => {}
                    _ => return Err(shape_err("broadcast", x.shape(), shape)),
                }
                let strides = broadcast_strides(x.shape(), shape);
                let mut out = vec![0.0; shape.iter().product()];
                let d = x.data();
                for_each_bcast(shape, &strides, |o, a| out[o] = d[a]);
                Tensor::new(shape.clone(), out)
            }
            OpKind::Reshape(shape) => {
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(shape_err("reshape", x.shape(), shape));
                }
                Ok(x.clone().reshaped(shape.clone()))
            }
            OpKind::GatherRows(indices) => {
                if x.shape().len() != 2 {
                    return Err(shape_err("gather_rows", x.shape(), &[indices.len()]));
                }
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let mut out = Vec::with_capacity(indices.len() * cols);
                for &i in indices {
                    if i >= rows {
                        return Err(Error::invalid(format!(
                            "gather_rows: row {i} out of range for {rows} rows"
                        )));
                    }
                    out.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
                }
                Tensor::new(vec![indices.len(), cols], out)
            }
            OpKind::Softmax(axis) => {
                let axis = *axis;
                if axis >= x.shape().len() {
                    return Err(shape_err("softmax", x.shape(), &[axis]));
                }
                let (outer, len, inner) = axis_split(x.shape(), axis);
                let d = x.data();
                let mut out = vec![0.0; d.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let max = (0..len).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for a in 0..len {
                            let e = (d[at(a)] - max).exp();
                            out[at(a)] = e;
                            total += e;
                        }
                        for a in 0..len {
                            out[at(a)] /= total;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), out)
            }
            OpKind::RowNorm => {
                let Some(&k) = x.shape().last() else {
                    return Err(shape_err("row_norm", x.shape(), &[]));
                };
                let out = x
                    .data()
                    .chunks(k)
                    .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                Tensor::new(x.shape()[..x.shape().len() - 1].to_vec(), out)
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.forward_op(OpKind::Linear, &[x, w, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Mean, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.forward_op(OpKind::SumAxis(axis), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Log, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Relu, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Softplus, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Tanh, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Sqrt, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Square, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::Neg, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.forward_op(OpKind::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.forward_op(OpKind::AddScalar(c), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.forward_op(OpKind::Clamp(lo, hi), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        self.forward_op(OpKind::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.forward_op(OpKind::Slice { axis, start, end }, &[a])
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Broadcast(shape.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::GatherRows(indices.to_vec()), &[table])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.forward_op(OpKind::Softmax(axis), &[a])
    }

    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.forward_op(OpKind::RowNorm, &[a])
    }
}

fn binary(kind: &OpKind, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let f: fn(f64, f64) -> f64 = match kind {
        OpKind::Add => |a, b| a + b,
        OpKind::Sub => |a, b| a - b,
        OpKind::Mul => |a, b| a * b,
        OpKind::Div => |a, b| a / b,
        _ => unreachable!(),
    };
    if x.shape() == y.shape() {
        let data = x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect();
        return Tensor::new(x.shape().to_vec(), data);
    }
    let shape = broadcast_shape(x.shape(), y.shape())
        .ok_or_else(|| shape_err(kind.name(), x.shape(), y.shape()))?;
    let sa = broadcast_strides(x.shape(), &shape);
    let sb = broadcast_strides(y.shape(), &shape);
    let mut out = vec![0.0; shape.iter().product()];
    let (xd, yd) = (x.data(), y.data());
    for_each_bcast2(&shape, &sa, &sb, |o, a, b| out[o] = f(xd[a], yd[b]));
    Tensor::new(shape, out)
}
