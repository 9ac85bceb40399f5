//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Values are 32-bit floats; every reduction (matmul inner products, sums,
//! means, softmax/layernorm row statistics) accumulates in 64-bit. The
//! [`Graph`] is a Wengert tape: operations are evaluated eagerly at record
//! time and replayed in reverse by [`Graph::backward`]. A separate 64-bit
//! forward replay ([`Graph::replay_f64`]) backs the finite-difference
//! gradient oracle in [`check`].

mod check;
mod io;
mod params;
mod replay;

pub use check::{finite_diff_check, finite_diff_check_multi, FdReport};
pub use io::{load_checkpoint, read_checkpoint, write_checkpoint, CheckpointError};
pub use params::{ParamId, ParamSet, RegisteredParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss node, got {0} elements")]
    NonScalarLoss(usize),
    #[error("tape order violated: node {node} consumes node {input} recorded later")]
    TapeOrder { node: usize, input: usize },
    #[error("tape-builder function is nondeterministic under a fixed seed")]
    Nondeterministic,
    #[error("LoRA rank {0} out of range (must be in 1..=min(m,n)={1})")]
    LoraRank(usize, usize),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// N(0, std^2) init from an explicit RNG stream.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut crate::rng::Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal_f32() * std).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Rows of a 2-D tensor (1-D counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on tensor of rank {}", self.shape.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite(context))
        }
    }
}

pub type NodeId = usize;

/// Primitive operations closed over the flow-diffusion network.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Add,
    /// (r x c) + row vector (c), broadcast over rows.
    AddRow,
    Mul,
    /// (r x c) * row vector (c), broadcast over rows.
    MulRow,
    Scale(f32),
    AddScalar(f32),
    Matmul,
    Transpose,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sum,
    Mean,
    Tanh,
    Gelu,
    Exp,
    Log,
    SoftmaxRows,
    LayerNormRows { eps: f32 },
    Clamp { lo: f32, hi: f32 },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by node id. Missing entries mean no path to the loss.
/// Stored in f64 (the backward pass accumulates in 64-bit); [`GradMap::dense`]
/// casts down for the optimizer.
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for `id` as f32, zeros when no path reaches it
    /// (disconnected params).
    pub fn dense(&self, id: NodeId) -> Tensor {
        match &self.grads[id] {
            Some(g) => {
                Tensor::new(self.shapes[id].clone(), g.iter().map(|&x| x as f32).collect())
            }
            None => Tensor::zeros(self.shapes[id].clone()),
        }
    }

    /// Full-precision gradient, zeros when absent.
    pub fn dense_f64(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[id].iter().product()],
        }
    }
}

/// Eagerly-evaluated Wengert tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub(crate) fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    pub(crate) fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad && matches!(self.nodes[id].op, Op::Input)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        debug_assert!(value.is_finite(), "non-finite output of {:?}", op);
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, value, needs_grad });
        id
    }

    /// Register a leaf tensor. `requires_grad` marks it for `backward`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Input, inputs: vec![], value: t, needs_grad: requires_grad });
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.input(t, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape, tb.shape, "add: shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (r, c) = (ta.rows(), ta.cols());
        assert_eq!(tb.numel(), c, "add_row: row vector length {} != cols {}", tb.numel(), c);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(ta.data[i * c + j] + tb.data[j]);
            }
        }
        let value = Tensor::new(ta.shape.clone(), data);
        self.push(Op::AddRow, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape, tb.shape, "mul: shape mismatch {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        self.push(Op::Mul, vec![a, b], value)
    }

    pub fn mul_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (r, c) = (ta.rows(), ta.cols());
        assert_eq!(tb.numel(), c, "mul_row: row vector length {} != cols {}", tb.numel(), c);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(ta.data[i * c + j] * tb.data[j]);
            }
        }
        let value = Tensor::new(ta.shape.clone(), data);
        self.push(Op::MulRow, vec![a, b], value)
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let ta = &self.nodes[a].value;
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x * c).collect());
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let ta = &self.nodes[a].value;
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x + c).collect());
        self.push(Op::AddScalar(c), vec![a], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(ta.shape.len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(tb.shape.len(), 2, "matmul: rhs must be 2-D");
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let value = Tensor::new(vec![m, n], matmul_f32(&ta.data, &tb.data, m, k, n));
        self.push(Op::Matmul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        assert_eq!(ta.shape.len(), 2, "transpose: tensor must be 2-D");
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let value = Tensor::new(vec![c, r], transpose_f32(&ta.data, r, c));
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let ta = &self.nodes[a].value;
        assert_eq!(
            shape.iter().product::<usize>(),
            ta.numel(),
            "reshape: {:?} incompatible with {} elements",
            shape,
            ta.numel()
        );
        let value = Tensor::new(shape, ta.data.clone());
        self.push(Op::Reshape, vec![a], value)
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = cols).
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: empty part list");
        assert!(axis < 2, "concat: axis must be 0 or 1");
        let first = &self.nodes[parts[0]].value;
        let (r0, c0) = (first.rows(), first.cols());
        let mut out_r = r0;
        let mut out_c = c0;
        for &p in &parts[1..] {
            let t = &self.nodes[p].value;
            if axis == 0 {
                assert_eq!(t.cols(), c0, "concat rows: col mismatch");
                out_r += t.rows();
            } else {
                assert_eq!(t.rows(), r0, "concat cols: row mismatch");
                out_c += t.cols();
            }
        }
        let mut data = vec![0.0f32; out_r * out_c];
        if axis == 0 {
            let mut row = 0;
            for &p in parts {
                let t = &self.nodes[p].value;
                let rr = t.rows();
                data[row * out_c..(row + rr) * out_c].copy_from_slice(&t.data);
                row += rr;
            }
        } else {
            let mut col = 0;
            for &p in parts {
                let t = &self.nodes[p].value;
                let cc = t.cols();
                for i in 0..out_r {
                    data[i * out_c + col..i * out_c + col + cc]
                        .copy_from_slice(&t.data[i * cc..(i + 1) * cc]);
                }
                col += cc;
            }
        }
        let value = Tensor::new(vec![out_r, out_c], data);
        self.push(Op::Concat { axis }, parts.to_vec(), value)
    }

    /// Slice a 2-D tensor along `axis`: rows or columns [start, start+len).
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let ta = &self.nodes[a].value;
        let (r, c) = (ta.rows(), ta.cols());
        assert!(axis < 2, "slice: axis must be 0 or 1");
        let value = if axis == 0 {
            assert!(start + len <= r, "slice rows: [{start}, {}) out of {r}", start + len);
            Tensor::new(vec![len, c], ta.data[start * c..(start + len) * c].to_vec())
        } else {
            assert!(start + len <= c, "slice cols: [{start}, {}) out of {c}", start + len);
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&ta.data[i * c + start..i * c + start + len]);
            }
            Tensor::new(vec![r, len], data)
        };
        self.push(Op::Slice { axis, start, len }, vec![a], value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let s: f64 = ta.data.iter().map(|&x| x as f64).sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s as f32))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let s: f64 = ta.data.iter().map(|&x| x as f64).sum();
        let value = Tensor::scalar((s / ta.numel() as f64) as f32);
        self.push(Op::Mean, vec![a], value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.tanh()).collect());
        self.push(Op::Tanh, vec![a], value)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let value =
            Tensor::new(ta.shape.clone(), ta.data.iter().map(|&x| gelu_approx(x)).collect());
        self.push(Op::Gelu, vec![a], value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.exp()).collect());
        self.push(Op::Exp, vec![a], value)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.ln()).collect());
        self.push(Op::Log, vec![a], value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = &self.nodes[a].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for j in 0..c {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                denom += e as f64;
            }
            for j in 0..c {
                data[i * c + j] = (data[i * c + j] as f64 / denom) as f32;
            }
        }
        let value = Tensor::new(ta.shape.clone(), data);
        self.push(Op::SoftmaxRows, vec![a], value)
    }

    pub fn layernorm_rows(&mut self, a: NodeId, eps: f32) -> NodeId {
        let ta = &self.nodes[a].value;
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let (mean, var) = row_mean_var(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for j in 0..c {
                data[i * c + j] = ((row[j] as f64 - mean) * inv) as f32;
            }
        }
        let value = Tensor::new(ta.shape.clone(), data);
        self.push(Op::LayerNormRows { eps }, vec![a], value)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f32, hi: f32) -> NodeId {
        let ta = &self.nodes[a].value;
        let value =
            Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.clamp(lo, hi)).collect());
        self.push(Op::Clamp { lo, hi }, vec![a], value)
    }

    /// sigmoid(x) = 0.5 * tanh(x/2) + 0.5, composed from primitives.
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let h = self.scale(a, 0.5);
        let t = self.tanh(h);
        let s = self.scale(t, 0.5);
        self.add_scalar(s, 0.5)
    }

    /// Mean of elementwise squared difference.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate (sum) over
    /// fan-out and are reported for every `requires_grad` input reachable
    /// from the loss; disconnected inputs read back as zeros via
    /// [`GradMap::dense`].
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let loss_numel = self.nodes[loss].value.numel();
        if loss_numel != 1 {
            return Err(TensorError::NonScalarLoss(loss_numel));
        }
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                if i >= id {
                    return Err(TensorError::TapeOrder { node: id, input: i });
                }
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_op(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| grads[id].take().filter(|_| n.needs_grad))
            .collect();
        Ok(GradMap { grads, shapes })
    }

    fn backward_op(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<f64>>], target: NodeId, contrib: Vec<f64>| {
            if !self.nodes[target].needs_grad {
                return;
            }
            match &mut grads[target] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                None => grads[target] = Some(contrib),
            }
        };
        let val = |n: NodeId, j: usize| self.nodes[n].value.data[j] as f64;
        match node.op {
            Op::Input => {}
            Op::Add => {
                acc(grads, node.inputs[0], g.to_vec());
                acc(grads, node.inputs[1], g.to_vec());
            }
            Op::AddRow => {
                acc(grads, node.inputs[0], g.to_vec());
                let c = self.nodes[node.inputs[1]].value.numel();
                let r = g.len() / c;
                let mut db = vec![0.0f64; c];
                for j in 0..c {
                    for i in 0..r {
                        db[j] += g[i * c + j];
                    }
                }
                acc(grads, node.inputs[1], db);
            }
            Op::Mul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let da = g.iter().enumerate().map(|(j, g)| g * val(b, j)).collect();
                let db = g.iter().enumerate().map(|(j, g)| g * val(a, j)).collect();
                acc(grads, a, da);
                acc(grads, b, db);
            }
            Op::MulRow => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let c = self.nodes[b].value.numel();
                let r = g.len() / c;
                let mut da = vec![0.0f64; g.len()];
                let mut db = vec![0.0f64; c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[i * c + j] * val(b, j);
                        db[j] += g[i * c + j] * val(a, i * c + j);
                    }
                }
                acc(grads, a, da);
                acc(grads, b, db);
            }
            Op::Scale(c) => {
                acc(grads, node.inputs[0], g.iter().map(|g| g * c as f64).collect());
            }
            Op::AddScalar(_) => {
                acc(grads, node.inputs[0], g.to_vec());
            }
            Op::Matmul => {
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (m, k) = (self.nodes[a].value.shape[0], self.nodes[a].value.shape[1]);
                let n = self.nodes[b].value.shape[1];
                // dA = g . B^T ; dB = A^T . g
                let mut da = vec![0.0f64; m * k];
                let mut db = vec![0.0f64; k * n];
                for i in 0..m {
                    for l in 0..k {
                        let mut s = 0.0f64;
                        for j in 0..n {
                            s += g[i * n + j] * val(b, l * n + j);
                        }
                        da[i * k + l] = s;
                    }
                }
                for l in 0..k {
                    for j in 0..n {
                        let mut s = 0.0f64;
                        for i in 0..m {
                            s += val(a, i * k + l) * g[i * n + j];
                        }
                        db[l * n + j] = s;
                    }
                }
                acc(grads, a, da);
                acc(grads, b, db);
            }
            Op::Transpose => {
                let t = &self.nodes[node.inputs[0]].value;
                let (r, c) = (t.shape[0], t.shape[1]);
                let mut da = vec![0.0f64; r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                acc(grads, node.inputs[0], da);
            }
            Op::Reshape => {
                acc(grads, node.inputs[0], g.to_vec());
            }
            Op::Concat { axis } => {
                let out_c = node.value.cols();
                if axis == 0 {
                    let mut row = 0;
                    for &p in &node.inputs {
                        let t = &self.nodes[p].value;
                        let rr = t.rows();
                        acc(grads, p, g[row * out_c..(row + rr) * out_c].to_vec());
                        row += rr;
                    }
                } else {
                    let rows = node.value.rows();
                    let mut col = 0;
                    for &p in &node.inputs {
                        let t = &self.nodes[p].value;
                        let cc = t.cols();
                        let mut dp = Vec::with_capacity(rows * cc);
                        for i in 0..rows {
                            dp.extend_from_slice(&g[i * out_c + col..i * out_c + col + cc]);
                        }
                        acc(grads, p, dp);
                        col += cc;
                    }
                }
            }
            Op::Slice { axis, start, len } => {
                let t = &self.nodes[node.inputs[0]].value;
                let (r, c) = (t.rows(), t.cols());
                let mut da = vec![0.0f64; r * c];
                if axis == 0 {
                    da[start * c..(start + len) * c].copy_from_slice(g);
                } else {
                    for i in 0..r {
                        da[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                }
                acc(grads, node.inputs[0], da);
            }
            Op::Sum => {
                let n = self.nodes[node.inputs[0]].value.numel();
                acc(grads, node.inputs[0], vec![g[0]; n]);
            }
            Op::Mean => {
                let n = self.nodes[node.inputs[0]].value.numel();
                acc(grads, node.inputs[0], vec![g[0] / n as f64; n]);
            }
            Op::Tanh => {
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(j, g)| {
                        let y = val(id, j);
                        g * (1.0 - y * y)
                    })
                    .collect();
                acc(grads, node.inputs[0], da);
            }
            Op::Gelu => {
                let da = g
                    .iter()
                    .enumerate()
                    .map(|(j, g)| g * gelu_approx_grad_f64(val(node.inputs[0], j)))
                    .collect();
                acc(grads, node.inputs[0], da);
            }
            Op::Exp => {
                let da = g.iter().enumerate().map(|(j, g)| g * val(id, j)).collect();
                acc(grads, node.inputs[0], da);
            }
            Op::Log => {
                let da = g.iter().enumerate().map(|(j, g)| g / val(node.inputs[0], j)).collect();
                acc(grads, node.inputs[0], da);
            }
            Op::SoftmaxRows => {
                let c = node.value.cols();
                let r = node.value.rows();
                let mut da = vec![0.0f64; r * c];
                for i in 0..r {
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += g[i * c + j] * val(id, i * c + j);
                    }
                    for j in 0..c {
                        da[i * c + j] = val(id, i * c + j) * (g[i * c + j] - dot);
                    }
                }
                acc(grads, node.inputs[0], da);
            }
            Op::LayerNormRows { eps } => {
                let x = &self.nodes[node.inputs[0]].value;
                let (r, c) = (x.rows(), x.cols());
                let mut da = vec![0.0f64; r * c];
                for i in 0..r {
                    let row = &x.data[i * c..(i + 1) * c];
                    let (_, var) = row_mean_var(row);
                    let inv = 1.0 / (var + eps as f64).sqrt();
                    let mut g_mean = 0.0f64;
                    let mut gy_mean = 0.0f64;
                    for j in 0..c {
                        g_mean += g[i * c + j];
                        gy_mean += g[i * c + j] * val(id, i * c + j);
                    }
                    g_mean /= c as f64;
                    gy_mean /= c as f64;
                    for j in 0..c {
                        da[i * c + j] =
                            inv * (g[i * c + j] - g_mean - val(id, i * c + j) * gy_mean);
                    }
                }
                acc(grads, node.inputs[0], da);
            }
            Op::Clamp { lo, hi } => {
                let x = &self.nodes[node.inputs[0]].value.data;
                acc(
                    grads,
                    node.inputs[0],
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                        .collect(),
                );
            }
        }
    }
}

/// Plain triple-loop matmul with f64 accumulation, also exposed as an
/// oracle for tests.
pub fn matmul_ref(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    matmul_f32(a, b, m, k, n)
}

pub(crate) fn matmul_f32(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += a[i * k + l] as f64 * b[l * n + j] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    out
}

pub(crate) fn transpose_f32(a: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn row_mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = row.iter().map(|&x| (x as f64 - mean) * (x as f64 - mean)).sum::<f64>() / n;
    (mean, var)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_approx(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C * (x + GELU_A * x * x * x);
    (0.5 * x * (1.0 + u.tanh())) as f32
}

fn gelu_approx_grad_f64(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests;
