use super::broadcast::{broadcast_shape, Plan};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{gemm, View};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation selector for [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    /// `[n, k] × [k, m]`.
    MatMul,
    /// Channels-last `[B, T, C_in]` with kernel `[k, C_in, C_out]`, stride 1,
    /// same padding (`(k-1)/2` zeros in front).
    Conv1d,
    /// Along axis 1 of `[B, T, C]`.
    MaxPool1d { kernel: usize, stride: usize },
    Selu,
    Sigmoid,
    Tanh,
    Sqrt,
    Square,
    /// Natural logarithm.
    Ln,
    /// Full reduction to shape `[1]` when `axis` is `None`.
    Sum { axis: Option<usize> },
    Mean,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    /// Per-channel standardization over every axis but the last, using the
    /// statistics of the values themselves.
    BatchNorm { eps: f64 },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    Selu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    Ln(Var),
    Sum { x: Var, axis: Option<usize> },
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    BatchNorm { x: Var, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape matches value"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], b: usize, t: usize, c: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let width = k * c;
    let mut cols = vec![0.0; b * t * width];
    for bi in 0..b {
        for ti in 0..t {
            let row = &mut cols[(bi * t + ti) * width..(bi * t + ti + 1) * width];
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let s = (bi * t + src as usize) * c;
                    row[j * c..(j + 1) * c].copy_from_slice(&x[s..s + c]);
                }
            }
        }
    }
    cols
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch mean and biased variance computed by a batch-norm node.
    pub fn batch_moments(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Dispatches one primitive by kind.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Conv1d => arity(2).and_then(|_| self.conv1d(inputs[0], inputs[1])),
            OpKind::MaxPool1d { kernel, stride } => arity(1).and_then(|_| self.maxpool1d(inputs[0], *kernel, *stride)),
            OpKind::Selu => arity(1).and_then(|_| self.selu(inputs[0])),
            OpKind::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            OpKind::Square => arity(1).and_then(|_| self.square(inputs[0])),
            OpKind::Ln => arity(1).and_then(|_| self.ln(inputs[0])),
            OpKind::Sum { axis } => arity(1).and_then(|_| self.sum(inputs[0], *axis)),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Concat { axis } => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => arity(1).and_then(|_| self.slice(inputs[0], *axis, *start, *len)),
            OpKind::Reshape { shape } => arity(1).and_then(|_| self.reshape(inputs[0], shape)),
            OpKind::BatchNorm { eps } => arity(1).and_then(|_| self.batch_norm(inputs[0], *eps)),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (pa, pb) = (Plan::new(&shape, ta.shape()), Plan::new(&shape, tb.shape()));
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = match (&pa, &pb) {
            (Plan::Same, Plan::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(da[pa.index(i)], db[pb.index(i)])).collect(),
        };
        Ok((Tensor::new(shape, data)?, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} × {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        gemm(1.0, ta.data(), View::row_major(n, k), tb.data(), View::row_major(k, m), 0.0, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sw[0] == 0 {
            return Err(Error::Shape(format!("conv1d input {sx:?} kernel {sw:?}")));
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let cols = im2col(tx.data(), b, t, c, k);
        let mut out = vec![0.0; b * t * cout];
        gemm(1.0, &cols, View::row_major(b * t, k * c), tw.data(), View::row_major(k * c, cout), 0.0, &mut out);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![b, t, cout], out)?, Op::Conv1d { x, w }, rg))
    }

    /// Ties go to the lowest time index.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let s = tx.shape();
        if s.len() != 3 || kernel == 0 || stride == 0 || s[1] < kernel {
            return Err(Error::Shape(format!("maxpool1d kernel {kernel} stride {stride} on {s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let tout = (t - kernel) / stride + 1;
        let d = tx.data();
        let mut out = Vec::with_capacity(b * tout * c);
        let mut argmax = Vec::with_capacity(b * tout * c);
        for bi in 0..b {
            for to in 0..tout {
                for ci in 0..c {
                    let mut best = (bi * t + to * stride) * c + ci;
                    for j in 1..kernel {
                        let idx = (bi * t + to * stride + j) * c + ci;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, tout, c], out)?, Op::MaxPool1d { x, argmax }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, op, rg))
    }

    pub fn selu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, selu, Op::Selu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let out = match axis {
            None => Tensor::scalar(t.data().iter().sum()),
            Some(a) => {
                if a >= t.rank() {
                    return Err(Error::Shape(format!("sum over axis {a} of {:?}", t.shape())));
                }
                let (outer, n, inner) = split_axis(t.shape(), a);
                let d = t.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                let mut shape: Vec<usize> = t.shape().to_vec();
                shape.remove(a);
                if shape.is_empty() {
                    shape.push(1);
                }
                Tensor::new(shape, out)?
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sum { x, axis }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!("concat {s:?} with {base:?} along {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() || start + len > t.shape()[axis] || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} along {axis} of {:?}", start + len, t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.rank() < 2 {
            return Err(Error::Shape(format!("batch norm needs rank ≥ 2, got {:?}", t.shape())));
        }
        let c = *t.shape().last().unwrap();
        let n = t.numel() / c;
        let d = t.data();
        let mut mean = vec![0.0; c];
        for row in d.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in d.chunks_exact(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks_exact(c) {
            for j in 0..c {
                out.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::BatchNorm { x, inv_std, mean, var }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar of shape {:?}", lt.shape())));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (v, s) in [(*a, 1.0), (*b, sign)] {
                        let plan = Plan::new(out.shape(), nodes[v.0].value.shape());
                        if let Some(gv) = acc(&mut grads, nodes, v) {
                            for (j, gj) in g.iter().enumerate() {
                                gv[plan.index(j)] += s * gj;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (pa, pb) = (Plan::new(out.shape(), nodes[a.0].value.shape()), Plan::new(out.shape(), nodes[b.0].value.shape()));
                    let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (j, gj) in g.iter().enumerate() {
                            ga[pa.index(j)] += gj * db[pb.index(j)];
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        for (j, gj) in g.iter().enumerate() {
                            gb[pb.index(j)] += gj * da[pa.index(j)];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (pa, pb) = (Plan::new(out.shape(), nodes[a.0].value.shape()), Plan::new(out.shape(), nodes[b.0].value.shape()));
                    let db = nodes[b.0].value.data();
                    let dout = out.data();
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        for (j, gj) in g.iter().enumerate() {
                            ga[pa.index(j)] += gj / db[pb.index(j)];
                        }
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        for (j, gj) in g.iter().enumerate() {
                            gb[pb.index(j)] -= gj * dout[j] / db[pb.index(j)];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let gview = View::row_major(n, m);
                    if let Some(ga) = acc(&mut grads, nodes, *a) {
                        gemm(1.0, &g, gview, tb.data(), View::row_major(k, m).t(), 1.0, ga);
                    }
                    if let Some(gb) = acc(&mut grads, nodes, *b) {
                        gemm(1.0, ta.data(), View::row_major(n, k).t(), &g, gview, 1.0, gb);
                    }
                }
                Op::Conv1d { x, w } => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (b, t, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (k, cout) = (tw.shape()[0], tw.shape()[2]);
                    let gview = View::row_major(b * t, cout);
                    if nodes[w.0].requires_grad {
                        let cols = im2col(tx.data(), b, t, c, k);
                        let gw = acc(&mut grads, nodes, *w).unwrap();
                        gemm(1.0, &cols, View::row_major(b * t, k * c).t(), &g, gview, 1.0, gw);
                    }
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        let mut gcols = vec![0.0; b * t * k * c];
                        gemm(1.0, &g, gview, tw.data(), View::row_major(k * c, cout).t(), 0.0, &mut gcols);
                        let pad = (k - 1) / 2;
                        for bi in 0..b {
                            for ti in 0..t {
                                let row = &gcols[(bi * t + ti) * k * c..(bi * t + ti + 1) * k * c];
                                for j in 0..k {
                                    let src = ti as isize + j as isize - pad as isize;
                                    if src >= 0 && (src as usize) < t {
                                        let s = (bi * t + src as usize) * c;
                                        for (d, v) in gx[s..s + c].iter_mut().zip(&row[j * c..(j + 1) * c]) {
                                            *d += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool1d { x, argmax } => {
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        for (gj, &src) in g.iter().zip(argmax) {
                            gx[src] += gj;
                        }
                    }
                }
                Op::Selu(x) => {
                    let dx = nodes[x.0].value.data();
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        for ((d, gj), xv) in gx.iter_mut().zip(&g).zip(dx) {
                            *d += gj * selu_grad(*xv);
                        }
                    }
                }
                Op::Sigmoid(x) | Op::Tanh(x) | Op::Sqrt(x) | Op::Square(x) | Op::Ln(x) => {
                    let dx = nodes[x.0].value.data();
                    let dy = out.data();
                    let deriv: fn(f64, f64) -> f64 = match node.op {
                        Op::Sigmoid(_) => |_, y| y * (1.0 - y),
                        Op::Tanh(_) => |_, y| 1.0 - y * y,
                        Op::Sqrt(_) => |_, y| 0.5 / y,
                        Op::Ln(_) => |x, _| 1.0 / x,
                        _ => |x, _| 2.0 * x,
                    };
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        for (j, gj) in g.iter().enumerate() {
                            gx[j] += gj * deriv(dx[j], dy[j]);
                        }
                    }
                }
                Op::Sum { x, axis } => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        match axis {
                            None => gx.iter_mut().for_each(|d| *d += g[0]),
                            Some(a) => {
                                let (outer, n, inner) = split_axis(&shape, *a);
                                for o in 0..outer {
                                    for j in 0..n {
                                        let dst = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                                        for (d, v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                            *d += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        let s = g[0] / gx.len() as f64;
                        gx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::Concat { inputs, axis } => {
                    let total = out.shape()[*axis];
                    let (outer, _, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for v in inputs {
                        let n = nodes[v.0].value.shape()[*axis];
                        if let Some(gv) = acc(&mut grads, nodes, *v) {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                for (d, s) in gv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += n;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let shape = nodes[x.0].value.shape().to_vec();
                    let len = out.shape()[*axis];
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        let (outer, n, inner) = split_axis(&shape, *axis);
                        for o in 0..outer {
                            let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                    }
                }
                Op::BatchNorm { x, inv_std, .. } => {
                    let c = inv_std.len();
                    let xhat = out.data();
                    let n = (xhat.len() / c) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            sum_g[j] += grow[j];
                            sum_gx[j] += grow[j] * xrow[j];
                        }
                    }
                    if let Some(gx) = acc(&mut grads, nodes, *x) {
                        for ((drow, grow), xrow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                drow[j] += inv_std[j] / n * (n * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]);
                            }
                        }
                    }
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
