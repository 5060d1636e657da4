//! Reverse-mode differentiation over an explicit operation graph.
//!
//! Nodes are appended in construction order, which is already a topological
//! order because every input must exist before it is used. `backward` walks
//! nodes in exact reverse construction order and accumulates adjoints in
//! input-index order, so forward values and gradients are bitwise
//! reproducible across runs.
//!
//! Graphs are single-threaded during construction and backward; independent
//! graphs may run in parallel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Primitive operations. Scalar parameters ride along with the kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Leaf,
    /// Forward identity; blocks all gradient flow.
    StopGradient,
    Add,
    Sub,
    Mul,
    /// Matrix plus a broadcast row vector: `[r,c] + [c]`.
    AddRowBias,
    Scale(f64),
    Matmul,
    Transpose,
    Dot,
    Relu,
    Log,
    Clamp { lo: f64, hi: f64 },
    RowSoftmax,
    RowL2Normalize,
    Sum,
    Mean,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Scale(_) => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Dot => "dot",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Clamp { .. } => "clamp",
            OpKind::RowSoftmax => "row_softmax",
            OpKind::RowL2Normalize => "row_l2_normalize",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Adjoints for every node of a graph, produced by [`Graph::backward`].
/// Nodes unreachable from the output (including anything behind a
/// stop-gradient) hold exact zeros.
pub struct Gradients {
    adjoints: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.adjoints[id.0]
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Rows with L2 norm below this are an error in `row_l2_normalize`. A silent
/// epsilon fix would mask representation collapse instead of surfacing it.
pub const MIN_ROW_NORM: f64 = 1e-8;

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Leaf, vec![], value)
    }

    /// Records a non-differentiable input. Same node semantics as a leaf;
    /// callers simply never read its adjoint.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value)
    }

    /// Forward identity whose adjoint contribution upstream is exactly zero.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(OpKind::StopGradient, vec![x], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Mul, &[a, b])
    }

    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::AddRowBias, &[m, bias])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply_primitive(OpKind::Scale(c), &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Transpose, &[x])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Dot, &[a, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Relu, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Log, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply_primitive(OpKind::Clamp { lo, hi }, &[x])
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::RowSoftmax, &[x])
    }

    pub fn row_l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::RowL2Normalize, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_primitive(OpKind::Mean, &[x])
    }

    /// Evaluates `op` on `inputs` and records the node. The output equals the
    /// mathematical definition of the op; every output value is checked finite.
    pub fn apply_primitive(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(op, inputs)?;
        if let Some(i) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                detail: format!("output value {} at flat index {}", value.data()[i], i),
            });
        }
        Ok(self.push(op, inputs.to_vec(), value))
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn arity(&self, op: OpKind, inputs: &[NodeId], n: usize) -> Result<()> {
        if inputs.len() != n {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                detail: format!("expected {} inputs, got {}", n, inputs.len()),
            });
        }
        Ok(())
    }

    fn eval(&self, op: OpKind, inputs: &[NodeId]) -> Result<Tensor> {
        match op {
            OpKind::Leaf | OpKind::StopGradient => unreachable!("recorded directly"),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                self.arity(op, inputs, 2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
                    });
                }
                let f: fn(f64, f64) -> f64 = match op {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)
            }
            OpKind::AddRowBias => {
                self.arity(op, inputs, 2)?;
                let m = self.value(inputs[0]);
                let bias = self.value(inputs[1]);
                let (r, c) = m.dims2(op.name())?;
                if bias.shape() != [c] {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        detail: format!("matrix {:?} with bias {:?}", m.shape(), bias.shape()),
                    });
                }
                let mut data = m.data().to_vec();
                for i in 0..r {
                    for (j, b) in bias.data().iter().enumerate() {
                        data[i * c + j] += b;
                    }
                }
                Tensor::new(vec![r, c], data)
            }
            OpKind::Scale(k) => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect())
            }
            OpKind::Matmul => {
                self.arity(op, inputs, 2)?;
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                let (m, k) = a.dims2(op.name())?;
                let (k2, n) = b.dims2(op.name())?;
                if k != k2 {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        detail: format!("{:?} x {:?}", a.shape(), b.shape()),
                    });
                }
                Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            OpKind::Transpose => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                let (r, c) = x.dims2(op.name())?;
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = x.data()[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], data)
            }
            OpKind::Dot => {
                self.arity(op, inputs, 2)?;
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                if a.shape().len() != 1 || a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        op: op.name(),
                        detail: format!("{:?} . {:?}", a.shape(), b.shape()),
                    });
                }
                let v = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
                Tensor::scalar(v)
            }
            OpKind::Relu => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            OpKind::Log => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                if let Some(i) = x.data().iter().position(|&v| v <= 0.0) {
                    return Err(Error::LogDomain { index: i, value: x.data()[i] });
                }
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect())
            }
            OpKind::Clamp { lo, hi } => {
                self.arity(op, inputs, 1)?;
                if !(lo <= hi) {
                    return Err(Error::InvalidInput(format!("clamp bounds {} > {}", lo, hi)));
                }
                let x = self.value(inputs[0]);
                let data = x.data().iter().map(|&v| v.max(lo).min(hi)).collect();
                Tensor::new(x.shape().to_vec(), data)
            }
            OpKind::RowSoftmax => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                let (rows, cols) = as_rows(x, op.name())?;
                let mut data = vec![0.0; rows * cols];
                for i in 0..rows {
                    let row = &x.data()[i * cols..(i + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        let e = (v - max).exp();
                        data[i * cols + j] = e;
                        sum += e;
                    }
                    for j in 0..cols {
                        data[i * cols + j] /= sum;
                    }
                }
                Tensor::new(x.shape().to_vec(), data)
            }
            OpKind::RowL2Normalize => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                let (rows, cols) = as_rows(x, op.name())?;
                let mut data = vec![0.0; rows * cols];
                for i in 0..rows {
                    let row = &x.data()[i * cols..(i + 1) * cols];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < MIN_ROW_NORM {
                        return Err(Error::ZeroNorm { op: op.name(), row: i });
                    }
                    for j in 0..cols {
                        data[i * cols + j] = row[j] / norm;
                    }
                }
                Tensor::new(x.shape().to_vec(), data)
            }
            OpKind::Sum => {
                self.arity(op, inputs, 1)?;
                Tensor::scalar(self.value(inputs[0]).data().iter().sum())
            }
            OpKind::Mean => {
                self.arity(op, inputs, 1)?;
                let x = self.value(inputs[0]);
                if x.numel() == 0 {
                    return Err(Error::InvalidInput("mean of empty tensor".into()));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
        }
    }

    /// Populates the adjoint of every node with `d output / d node`.
    ///
    /// `output` must hold exactly one element. Visits nodes in exact reverse
    /// construction order with contributions accumulated in input-index order,
    /// so results are deterministic.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("output must be scalar, shape is {:?}", out.shape()),
            });
        }
        let mut adj: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        adj[output.0].data_mut()[0] = 1.0;

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if adj[idx].data().iter().all(|&v| v == 0.0) && idx != output.0 {
                continue;
            }
            let grad = adj[idx].clone();
            match node.op {
                OpKind::Leaf | OpKind::StopGradient => {}
                OpKind::Add => {
                    accumulate(&mut adj[node.inputs[0].0], grad.data(), 1.0);
                    accumulate(&mut adj[node.inputs[1].0], grad.data(), 1.0);
                }
                OpKind::Sub => {
                    accumulate(&mut adj[node.inputs[0].0], grad.data(), 1.0);
                    accumulate(&mut adj[node.inputs[1].0], grad.data(), -1.0);
                }
                OpKind::Mul => {
                    let a = self.value(node.inputs[0]).clone();
                    let b = self.value(node.inputs[1]).clone();
                    accumulate_prod(&mut adj[node.inputs[0].0], grad.data(), b.data());
                    accumulate_prod(&mut adj[node.inputs[1].0], grad.data(), a.data());
                }
                OpKind::AddRowBias => {
                    accumulate(&mut adj[node.inputs[0].0], grad.data(), 1.0);
                    let (r, c) = node.value.dims2("add_row_bias").expect("checked");
                    let bias_adj = adj[node.inputs[1].0].data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            bias_adj[j] += grad.data()[i * c + j];
                        }
                    }
                }
                OpKind::Scale(k) => {
                    accumulate(&mut adj[node.inputs[0].0], grad.data(), k);
                }
                OpKind::Matmul => {
                    let a = self.value(node.inputs[0]);
                    let b = self.value(node.inputs[1]);
                    let (m, k) = a.dims2("matmul").expect("checked");
                    let n = b.shape()[1];
                    // dA = G B^T, dB = A^T G
                    let bt = transpose_raw(b.data(), k, n);
                    let da = matmul_raw(grad.data(), &bt, m, n, k);
                    let at = transpose_raw(a.data(), m, k);
                    let db = matmul_raw(&at, grad.data(), k, m, n);
                    accumulate(&mut adj[node.inputs[0].0], &da, 1.0);
                    accumulate(&mut adj[node.inputs[1].0], &db, 1.0);
                }
                OpKind::Transpose => {
                    let (c, r) = node.value.dims2("transpose").expect("checked");
                    let gt = transpose_raw(grad.data(), c, r);
                    accumulate(&mut adj[node.inputs[0].0], &gt, 1.0);
                }
                OpKind::Dot => {
                    let g = grad.data()[0];
                    let a = self.value(node.inputs[0]).clone();
                    let b = self.value(node.inputs[1]).clone();
                    accumulate(&mut adj[node.inputs[0].0], b.data(), g);
                    accumulate(&mut adj[node.inputs[1].0], a.data(), g);
                }
                OpKind::Relu => {
                    let x = self.value(node.inputs[0]).clone();
                    let target = adj[node.inputs[0].0].data_mut();
                    for i in 0..x.numel() {
                        if x.data()[i] > 0.0 {
                            target[i] += grad.data()[i];
                        }
                    }
                }
                OpKind::Log => {
                    let x = self.value(node.inputs[0]).clone();
                    let target = adj[node.inputs[0].0].data_mut();
                    for i in 0..x.numel() {
                        target[i] += grad.data()[i] / x.data()[i];
                    }
                }
                OpKind::Clamp { lo, hi } => {
                    // Gradient passes on the closed interval, zero outside.
                    let x = self.value(node.inputs[0]).clone();
                    let target = adj[node.inputs[0].0].data_mut();
                    for i in 0..x.numel() {
                        let v = x.data()[i];
                        if v >= lo && v <= hi {
                            target[i] += grad.data()[i];
                        }
                    }
                }
                OpKind::RowSoftmax => {
                    // per row: dx_j = y_j (g_j - sum_i g_i y_i)
                    let y = &node.value;
                    let (rows, cols) = as_rows(y, "row_softmax").expect("checked");
                    let target = adj[node.inputs[0].0].data_mut();
                    for i in 0..rows {
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &grad.data()[i * cols..(i + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            target[i * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                OpKind::RowL2Normalize => {
                    // per row: dx = (g - (g . y) y) / |x|
                    let x = self.value(node.inputs[0]).clone();
                    let y = &node.value;
                    let (rows, cols) = as_rows(y, "row_l2_normalize").expect("checked");
                    let target = adj[node.inputs[0].0].data_mut();
                    for i in 0..rows {
                        let xr = &x.data()[i * cols..(i + 1) * cols];
                        let yr = &y.data()[i * cols..(i + 1) * cols];
                        let gr = &grad.data()[i * cols..(i + 1) * cols];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            target[i * cols + j] += (gr[j] - dot * yr[j]) / norm;
                        }
                    }
                }
                OpKind::Sum => {
                    let g = grad.data()[0];
                    let target = adj[node.inputs[0].0].data_mut();
                    for v in target.iter_mut() {
                        *v += g;
                    }
                }
                OpKind::Mean => {
                    let n = self.value(node.inputs[0]).numel() as f64;
                    let g = grad.data()[0] / n;
                    let target = adj[node.inputs[0].0].data_mut();
                    for v in target.iter_mut() {
                        *v += g;
                    }
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Treats a rank-1 tensor as a single row, rank-2 as a stack of rows.
fn as_rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::ShapeMismatch {
            op,
            detail: format!("expected vector or matrix, shape is {:?}", other),
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
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

fn accumulate(target: &mut Tensor, src: &[f64], scale: f64) {
    for (t, &s) in target.data_mut().iter_mut().zip(src) {
        *t += s * scale;
    }
}

fn accumulate_prod(target: &mut Tensor, g: &[f64], other: &[f64]) {
    for ((t, &gv), &ov) in target.data_mut().iter_mut().zip(g).zip(other) {
        *t += gv * ov;
    }
}
