use super::graph::{axis_split, sigmoid, Graph, Node, Op, OpKind, Var};
use super::kernels::{broadcast_strides, for_each_bcast, for_each_bcast2, gemm};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar loss with respect to every leaf of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. Leaves unreachable from the loss get zeros;
    /// non-leaf nodes return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        empty => *empty = Some(g),
    }
}

impl Graph {
    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Constant => {}
                Op::Kind(kind) => self.backward_kind(kind, node, &g, &mut grads),
                Op::Custom(f) => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| self.value(*v)).collect();
                    let needs: Vec<bool> = node.inputs.iter().map(|v| self.requires_grad(*v)).collect();
                    let ins = f.backward(&inputs, &node.value, &g, &needs);
                    for ((v, gi), need) in node.inputs.iter().zip(ins).zip(needs) {
                        if let (Some(gi), true) = (gi, need) {
                            debug_assert_eq!(gi.len(), self.value(*v).numel(), "{}", f.name());
                            accumulate(&mut grads, *v, gi);
                        }
                    }
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && out[i].is_none() {
                out[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backward_kind(&self, kind: &OpKind, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let a = node.inputs[0];
        let need_a = self.requires_grad(a);
        let x = self.value(a);
        let y = &node.value;
        // Elementwise unary rule: dx = g * local(x, y).
        let mut unary = |local: &dyn Fn(f64, f64) -> f64| {
            if !need_a {
                return;
            }
            let ga = slot(grads, a, x.numel());
            for (((acc, &gi), &xi), &yi) in ga.iter_mut().zip(g).zip(x.data()).zip(y.data()) {
                *acc += gi * local(xi, yi);
            }
        };
        match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let b = node.inputs[1];
                self.backward_binary(kind, a, b, y.shape(), g, grads);
            }
            OpKind::MatMul => {
                let b = node.inputs[1];
                let w = self.value(b);
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if need_a {
                    gemm(m, n, k, g, (n, 1), w.data(), (1, n), slot(grads, a, m * k), 1.0);
                }
                if self.requires_grad(b) {
                    gemm(k, m, n, x.data(), (1, k), g, (n, 1), slot(grads, b, k * n), 1.0);
                }
            }
            OpKind::Linear => {
                let (wv, bv) = (node.inputs[1], node.inputs[2]);
                let w = self.value(wv);
                let (m, k, n) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                if need_a {
                    gemm(m, n, k, g, (n, 1), w.data(), (1, n), slot(grads, a, m * k), 1.0);
                }
                if self.requires_grad(wv) {
                    gemm(k, m, n, x.data(), (1, k), g, (n, 1), slot(grads, wv, k * n), 1.0);
                }
                if self.requires_grad(bv) {
                    let gb = slot(grads, bv, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                    }
                }
            }
            OpKind::Sum | OpKind::Mean => {
                if need_a {
                    let n = if *kind == OpKind::Mean { x.numel() as f64 } else { 1.0 };
                    let s = g[0] / n;
                    slot(grads, a, x.numel()).iter_mut().for_each(|v| *v += s);
                }
            }
            OpKind::SumAxis(axis) => {
                if need_a {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let ga = slot(grads, a, x.numel());
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(acc, v)| *acc += v);
                        }
                    }
                }
            }
            OpKind::Exp => unary(&|_, y| y),
            OpKind::Log => unary(&|x, _| 1.0 / x),
            OpKind::Relu => unary(&|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            OpKind::Softplus => unary(&|x, _| sigmoid(x)),
            OpKind::Sigmoid => unary(&|_, y| y * (1.0 - y)),
            OpKind::Tanh => unary(&|_, y| 1.0 - y * y),
            OpKind::Sqrt => unary(&|_, y| 0.5 / y),
            OpKind::Square => unary(&|x, _| 2.0 * x),
            OpKind::Neg => unary(&|_, _| -1.0),
            OpKind::Scale(c) => unary(&|_, _| *c),
            OpKind::AddScalar(_) => unary(&|_, _| 1.0),
            OpKind::Clamp(lo, hi) => unary(&|x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
            OpKind::Concat(axis) => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &v in &node.inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let gv = slot(grads, v, outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(acc, s)| *acc += s);
                        }
                    }
                    offset += len;
                }
            }
            OpKind::Slice { axis, start, end } => {
                if need_a {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let width = (end - start) * inner;
                    let ga = slot(grads, a, x.numel());
                    for o in 0..outer {
                        let dst = &mut ga[(o * len + start) * inner..(o * len + end) * inner];
                        let src = &g[o * width..(o + 1) * width];
                        dst.iter_mut().zip(src).for_each(|(acc, s)| *acc += s);
                    }
                }
            }
            OpKind::Broadcast(shape) => {
                if need_a {
                    let strides = broadcast_strides(x.shape(), shape);
                    let ga = slot(grads, a, x.numel());
                    for_each_bcast(shape, &strides, |o, i| ga[i] += g[o]);
                }
            }
            OpKind::Reshape(_) => unary(&|_, _| 1.0),
            OpKind::GatherRows(indices) => {
                if need_a {
                    let cols = x.shape()[1];
                    let ga = slot(grads, a, x.numel());
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut ga[i * cols..(i + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(acc, s)| *acc += s);
                    }
                }
            }
            OpKind::Softmax(axis) => {
                if need_a {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let yd = y.data();
                    let ga = slot(grads, a, x.numel());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * yd[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += yd[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            OpKind::RowNorm => {
                if need_a {
                    let k = *x.shape().last().unwrap();
                    let ga = slot(grads, a, x.numel());
                    for (r, (&norm, &gr)) in y.data().iter().zip(g).enumerate() {
                        if norm > 0.0 {
                            for c in 0..k {
                                ga[r * k + c] += gr * x.data()[r * k + c] / norm;
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_binary(
        &self,
        kind: &OpKind,
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (x, y) = (self.value(a), self.value(b));
        let (xd, yd) = (x.data(), y.data());
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let mut ga = if need_a { vec![0.0; x.numel()] } else { Vec::new() };
        let mut gb = if need_b { vec![0.0; y.numel()] } else { Vec::new() };
        let mut visit = |o: usize, i: usize, j: usize| {
            let gi = g[o];
            let (da, db) = match kind {
                OpKind::Add => (gi, gi),
                OpKind::Sub => (gi, -gi),
                OpKind::Mul => (gi * yd[j], gi * xd[i]),
                OpKind::Div => (gi / yd[j], -gi * xd[i] / (yd[j] * yd[j])),
                _ => unreachable!(),
            };
            if need_a {
                ga[i] += da;
            }
            if need_b {
                gb[j] += db;
            }
        };
        if x.shape() == y.shape() {
            for o in 0..g.len() {
                visit(o, o, o);
            }
        } else {
            let sa = broadcast_strides(x.shape(), out_shape);
            let sb = broadcast_strides(y.shape(), out_shape);
            for_each_bcast2(out_shape, &sa, &sb, visit);
        }
        if need_a {
            accumulate(grads, a, ga);
        }
        if need_b {
            accumulate(grads, b, gb);
        }
    }
}
