//! Dense f64 tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node; [`Var`] is an index
//! into the tape. Nodes only reference earlier nodes, so walking the tape in
//! reverse index order is a reverse topological traversal and visits each node
//! exactly once. Gradients accumulate by summation when a value feeds several
//! consumers.
//!
//! Shape or contract violations (mismatched dimensions, backward on a
//! non-scalar, backward twice without reset) are programmer errors and panic
//! with a message naming the offending shapes. Data-dependent failures are
//! handled by the callers with `Result`.

use std::f64::consts::PI;

/// Plain tensor value: row-major f64 data plus shape. Rank 1 and 2 cover the
/// whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Identity matrix, used by tests and identity-initialized projections.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Reduction kind for [`Tape::reduce_axis`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Matrix plus row vector, broadcast over rows.
    AddRow(Var, Var),
    Gelu(Var),
    Softmax(Var, usize),
    MeanAxis(Var, usize),
    /// Argmax indices per output slot are cached for the backward route.
    MaxAxis(Var, usize, Vec<usize>),
    SumAll(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        /// Cached per-row (mean, 1/std) from the forward pass.
        row_stats: Vec<(f64, f64)>,
    },
    CrossEntropy {
        scores: Var,
        target: usize,
        /// Cached softmax of the scores.
        probs: Vec<f64>,
    },
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Reshape(Var),
    StackScalars(Vec<Var>),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
pub struct Tape {
    nodes: Vec<Node>,
    backward_run: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_run: false,
        }
    }

    /// Insert a tensor as a graph input. `requires_grad` marks it as a
    /// gradient sink for [`Tape::backward`].
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(
            node.value.len(),
            1,
            "scalar_value on tensor of shape {:?}",
            node.shape
        );
        node.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        assert!(self.backward_run, "grad() before backward()");
        &self.nodes[v.0].grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        let numel = value.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: vec![0.0; numel],
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// 2D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[0],
            "matmul shape mismatch: {:?} x {:?}",
            ash,
            bsh
        );
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            k,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ash = &self.nodes[a.0].shape;
        assert_eq!(ash.len(), 2, "transpose on rank-{} tensor", ash.len());
        let (m, n) = (ash[0], ash[1]);
        let src = &self.nodes[a.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        self.push(Op::Transpose(a), vec![n, m], out, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert_eq!(
            ash, bsh,
            "elementwise shape mismatch: {:?} vs {:?}",
            ash, bsh
        );
        let shape = ash.clone();
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(op, shape, out, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), shape, out, needs)
    }

    /// Add a row vector to every row of a matrix (bias broadcast).
    pub fn add_row(&mut self, m: Var, row: Var) -> Var {
        let (msh, rsh) = (&self.nodes[m.0].shape, &self.nodes[row.0].shape);
        assert!(
            msh.len() == 2 && rsh.len() == 1 && msh[1] == rsh[0],
            "add_row shape mismatch: {:?} + {:?}",
            msh,
            rsh
        );
        let (rows, cols) = (msh[0], msh[1]);
        let mut out = self.nodes[m.0].value.clone();
        let r = &self.nodes[row.0].value;
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] += r[j];
            }
        }
        let needs = self.needs(m) || self.needs(row);
        self.push(Op::AddRow(m, row), vec![rows, cols], out, needs)
    }

    /// GELU in the tanh approximation; the activation for every MLP here.
    pub fn gelu(&mut self, a: Var) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let out: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Gelu(a), shape, out, needs)
    }

    /// Max-subtracted softmax along `axis` (0 for vectors, 0/1 for matrices).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        assert!(
            axis < shape.len(),
            "softmax axis {} invalid for shape {:?}",
            axis,
            shape
        );
        let mut out = self.nodes[a.0].value.clone();
        for_each_lane(&shape, axis, |start, stride, len| {
            softmax_lane(&mut out, start, stride, len);
        });
        let needs = self.needs(a);
        self.push(Op::Softmax(a, axis), shape, out, needs)
    }

    /// Reduce along `axis`, removing it. Mean spreads gradient uniformly;
    /// max routes it to the first argmax in index order.
    pub fn reduce_axis(&mut self, kind: Reduce, a: Var, axis: usize) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        assert!(
            axis < shape.len(),
            "reduce axis {} invalid for shape {:?}",
            axis,
            shape
        );
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];
        let mut argmax = vec![0usize; if kind == Reduce::Max { out_numel } else { 0 }];
        let src = &self.nodes[a.0].value;
        let mut lane = 0usize;
        for_each_lane(&shape, axis, |start, stride, len| {
            match kind {
                Reduce::Mean => {
                    let mut s = 0.0;
                    for i in 0..len {
                        s += src[start + i * stride];
                    }
                    out[lane] = s / len as f64;
                }
                Reduce::Max => {
                    let mut best = src[start];
                    let mut best_i = 0usize;
                    for i in 1..len {
                        let v = src[start + i * stride];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                    out[lane] = best;
                    argmax[lane] = best_i;
                }
            }
            lane += 1;
        });
        let needs = self.needs(a);
        let op = match kind {
            Reduce::Mean => Op::MeanAxis(a, axis),
            Reduce::Max => Op::MaxAxis(a, axis, argmax),
        };
        self.push(op, out_shape, out, needs)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), vec![1], vec![s], needs)
    }

    /// Per-row normalization to zero mean / unit variance over the last
    /// dimension, followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var) -> Var {
        let ish = self.nodes[input.0].shape.clone();
        let cols = *ish.last().expect("layer_norm on empty shape");
        assert!(cols >= 2, "layer_norm needs width >= 2, got {:?}", ish);
        let gsh = &self.nodes[gain.0].shape;
        let bsh = &self.nodes[bias.0].shape;
        assert!(
            gsh == &[cols] && bsh == &[cols],
            "layer_norm gain/bias shapes {:?}/{:?} must be [{}]",
            gsh,
            bsh,
            cols
        );
        let rows = self.nodes[input.0].value.len() / cols;
        let mut out = vec![0.0; rows * cols];
        let mut row_stats = Vec::with_capacity(rows);
        {
            let src = &self.nodes[input.0].value;
            let g = &self.nodes[gain.0].value;
            let b = &self.nodes[bias.0].value;
            for r in 0..rows {
                let row = &src[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row_stats.push((mean, inv_std));
                for j in 0..cols {
                    let xhat = (row[j] - mean) * inv_std;
                    out[r * cols + j] = xhat * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(input) || self.needs(gain) || self.needs(bias);
        self.push(
            Op::LayerNorm {
                input,
                gain,
                bias,
                row_stats,
            },
            ish,
            out,
            needs,
        )
    }

    /// `-log softmax(scores)[target]` via the log-sum-exp trick.
    pub fn cross_entropy(&mut self, scores: Var, target: usize) -> Var {
        let ssh = &self.nodes[scores.0].shape;
        assert_eq!(ssh.len(), 1, "cross_entropy expects a vector, got {:?}", ssh);
        let k = ssh[0];
        assert!(
            target < k,
            "cross_entropy target {} out of range for {} classes",
            target,
            k
        );
        let s = &self.nodes[scores.0].value;
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = s.iter().map(|&x| (x - max).exp()).sum();
        let log_sum_exp = max + sum_exp.ln();
        let loss = log_sum_exp - s[target];
        let probs: Vec<f64> = s.iter().map(|&x| (x - max).exp() / sum_exp).collect();
        let needs = self.needs(scores);
        self.push(
            Op::CrossEntropy {
                scores,
                target,
                probs,
            },
            vec![1],
            vec![loss],
            needs,
        )
    }

    /// Stack two matrices vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(
            ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[1],
            "concat_rows shape mismatch: {:?} / {:?}",
            ash,
            bsh
        );
        let (ra, rb, cols) = (ash[0], bsh[0], ash[1]);
        let mut out = Vec::with_capacity((ra + rb) * cols);
        out.extend_from_slice(&self.nodes[a.0].value);
        out.extend_from_slice(&self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows(a, b), vec![ra + rb, cols], out, needs)
    }

    /// Contiguous row range `[start, start+len)` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ash = &self.nodes[a.0].shape;
        assert!(
            ash.len() == 2 && start + len <= ash[0],
            "slice_rows [{}, {}) out of range for shape {:?}",
            start,
            start + len,
            ash
        );
        let cols = ash[1];
        let out = self.nodes[a.0].value[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        self.push(Op::SliceRows(a, start), vec![len, cols], out, needs)
    }

    /// View with a new shape of identical element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.nodes[a.0].value.len(),
            "reshape to {:?} changes element count of {:?}",
            shape,
            self.nodes[a.0].shape
        );
        let out = self.nodes[a.0].value.clone();
        let needs = self.needs(a);
        self.push(Op::Reshape(a), shape, out, needs)
    }

    /// Assemble scalar nodes into one vector (a score row over classes).
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_scalars on empty slice");
        let mut out = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &p in parts {
            assert_eq!(
                self.nodes[p.0].value.len(),
                1,
                "stack_scalars expects scalars, got {:?}",
                self.nodes[p.0].shape
            );
            out.push(self.nodes[p.0].value[0]);
            needs |= self.needs(p);
        }
        self.push(
            Op::StackScalars(parts.to_vec()),
            vec![parts.len()],
            out,
            needs,
        )
    }

    /// Dot product of two equal-length vectors, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul(a, b);
        self.sum_all(prod)
    }

    /// Element `idx` of a vector, as a scalar node.
    pub fn slice_scalar(&mut self, a: Var, idx: usize) -> Var {
        let ash = &self.nodes[a.0].shape;
        assert_eq!(ash.len(), 1, "slice_scalar expects a vector, got {:?}", ash);
        let n = ash[0];
        let col = self.reshape(a, vec![n, 1]);
        let row = self.slice_rows(col, idx, 1);
        self.reshape(row, vec![1])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every reachable node inserted
    /// with `requires_grad` receives its gradient. A second call without
    /// [`Tape::zero_grads`] is rejected.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            !self.backward_run,
            "backward() called twice without zero_grads()"
        );
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward on non-scalar loss of shape {:?}",
            self.nodes[loss.0].shape
        );
        self.backward_run = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.step_backward(i);
        }
    }

    /// Clear all accumulated gradients and re-arm backward().
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.backward_run = false;
    }

    fn step_backward(&mut self, i: usize) {
        // Take the grad and op out of the node so the arms below can borrow
        // the arena freely; both are restored at the end.
        let grad = std::mem::take(&mut self.nodes[i].grad);
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a.0].shape[0];
                let k = self.nodes[a.0].shape[1];
                let n = self.nodes[b.0].shape[1];
                if a == b {
                    // dA += dC * A^T + A^T * dC (square case)
                    let mut tmp = vec![0.0; m * k];
                    matmul_nt_acc(&grad, &self.nodes[b.0].value, m, n, k, &mut tmp);
                    matmul_tn_acc(&self.nodes[a.0].value, &grad, k, m, n, &mut tmp);
                    acc(&mut self.nodes[a.0].grad, &tmp, 1.0);
                } else {
                    if self.needs(a) {
                        // dA += dC * B^T
                        let (bn, an) = two_nodes(&mut self.nodes, b.0, a.0);
                        matmul_nt_acc(&grad, &bn.value, m, n, k, &mut an.grad);
                    }
                    if self.needs(b) {
                        // dB += A^T * dC
                        let (an, bn) = two_nodes(&mut self.nodes, a.0, b.0);
                        matmul_tn_acc(&an.value, &grad, k, m, n, &mut bn.grad);
                    }
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let ag = &mut self.nodes[a.0].grad;
                for r in 0..m {
                    for c in 0..n {
                        ag[r * n + c] += grad[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                acc(&mut self.nodes[a.0].grad, &grad, 1.0);
                acc(&mut self.nodes[b.0].grad, &grad, 1.0);
            }
            Op::Sub(a, b) => {
                acc(&mut self.nodes[a.0].grad, &grad, 1.0);
                acc(&mut self.nodes[b.0].grad, &grad, -1.0);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if a == b {
                    // d(x ⊙ x) = 2x ⊙ dC
                    let node = &mut self.nodes[a.0];
                    for ((g, &x), ag) in grad.iter().zip(node.value.iter()).zip(node.grad.iter_mut())
                    {
                        *ag += 2.0 * g * x;
                    }
                } else {
                    if self.needs(a) {
                        let (bn, an) = two_nodes(&mut self.nodes, b.0, a.0);
                        for ((g, &bv), ag) in grad.iter().zip(bn.value.iter()).zip(an.grad.iter_mut())
                        {
                            *ag += g * bv;
                        }
                    }
                    if self.needs(b) {
                        let (an, bn) = two_nodes(&mut self.nodes, a.0, b.0);
                        for ((g, &av), bg) in grad.iter().zip(an.value.iter()).zip(bn.grad.iter_mut())
                        {
                            *bg += g * av;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                acc(&mut self.nodes[a.0].grad, &grad, *c);
            }
            Op::AddRow(m, row) => {
                let cols = self.nodes[m.0].shape[1];
                acc(&mut self.nodes[m.0].grad, &grad, 1.0);
                let rg = &mut self.nodes[row.0].grad;
                for (idx, g) in grad.iter().enumerate() {
                    rg[idx % cols] += g;
                }
            }
            Op::Gelu(a) => {
                let node = &mut self.nodes[a.0];
                for ((g, &x), ag) in grad.iter().zip(node.value.iter()).zip(node.grad.iter_mut()) {
                    *ag += g * gelu_grad(x);
                }
            }
            Op::Softmax(a, axis) => {
                let (a, axis) = (*a, *axis);
                let shape = self.nodes[i].shape.clone();
                let y = std::mem::take(&mut self.nodes[i].value);
                {
                    let ag = &mut self.nodes[a.0].grad;
                    for_each_lane(&shape, axis, |start, stride, len| {
                        let mut dot = 0.0;
                        for j in 0..len {
                            let idx = start + j * stride;
                            dot += grad[idx] * y[idx];
                        }
                        for j in 0..len {
                            let idx = start + j * stride;
                            ag[idx] += y[idx] * (grad[idx] - dot);
                        }
                    });
                }
                self.nodes[i].value = y;
            }
            Op::MeanAxis(a, axis) => {
                let (a, axis) = (*a, *axis);
                let shape = self.nodes[a.0].shape.clone();
                let len = shape[axis] as f64;
                let ag = &mut self.nodes[a.0].grad;
                let mut lane = 0usize;
                for_each_lane(&shape, axis, |start, stride, n| {
                    let g = grad[lane] / len;
                    for j in 0..n {
                        ag[start + j * stride] += g;
                    }
                    lane += 1;
                });
            }
            Op::MaxAxis(a, axis, argmax) => {
                let (a, axis) = (*a, *axis);
                let shape = self.nodes[a.0].shape.clone();
                let ag = &mut self.nodes[a.0].grad;
                let mut lane = 0usize;
                for_each_lane(&shape, axis, |start, stride, _| {
                    ag[start + argmax[lane] * stride] += grad[lane];
                    lane += 1;
                });
            }
            Op::SumAll(a) => {
                let g = grad[0];
                for ag in &mut self.nodes[a.0].grad {
                    *ag += g;
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                row_stats,
            } => {
                let (input, gain, bias) = (*input, *gain, *bias);
                let cols = *self.nodes[input.0].shape.last().unwrap();
                let rows = self.nodes[input.0].value.len() / cols;
                let x = std::mem::take(&mut self.nodes[input.0].value);
                let g_vec = self.nodes[gain.0].value.clone();
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let (mean, inv_std) = row_stats[r];
                    let row = &x[r * cols..(r + 1) * cols];
                    let dy = &grad[r * cols..(r + 1) * cols];
                    {
                        let gg = &mut self.nodes[gain.0].grad;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv_std;
                            gg[j] += dy[j] * xhat;
                        }
                    }
                    {
                        let bg = &mut self.nodes[bias.0].grad;
                        for j in 0..cols {
                            bg[j] += dy[j];
                        }
                    }
                    if self.needs(input) {
                        // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv_std;
                            dxhat[j] = dy[j] * g_vec[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat;
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        let ig = &mut self.nodes[input.0].grad;
                        for j in 0..cols {
                            let xhat = (row[j] - mean) * inv_std;
                            ig[r * cols + j] +=
                                inv_std * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
                self.nodes[input.0].value = x;
            }
            Op::CrossEntropy {
                scores,
                target,
                probs,
            } => {
                let g = grad[0];
                let sg = &mut self.nodes[scores.0].grad;
                for (j, &p) in probs.iter().enumerate() {
                    let one_hot = if j == *target { 1.0 } else { 0.0 };
                    sg[j] += g * (p - one_hot);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].value.len();
                acc(&mut self.nodes[a.0].grad, &grad[..na], 1.0);
                acc(&mut self.nodes[b.0].grad, &grad[na..], 1.0);
            }
            Op::SliceRows(a, start) => {
                let cols = self.nodes[a.0].shape[1];
                let ag = &mut self.nodes[a.0].grad;
                for (idx, g) in grad.iter().enumerate() {
                    ag[start * cols + idx] += g;
                }
            }
            Op::Reshape(a) => {
                acc(&mut self.nodes[a.0].grad, &grad, 1.0);
            }
            Op::StackScalars(parts) => {
                for (j, p) in parts.iter().enumerate() {
                    self.nodes[p.0].grad[0] += grad[j];
                }
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = grad;
    }
}

// ── raw kernels ─────────────────────────────────────────────────────────

/// C = A * B, A is m×k, B is k×n. ikj order for contiguous inner loops.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// out += A * B^T, A is m×k, B is n×k (row dots).
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out += A^T * B, A is p×m, B is p×n (sum of outer products).
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, p: usize, n: usize, out: &mut [f64]) {
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn acc(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

/// Split two distinct nodes out of the arena for simultaneous access.
fn two_nodes(nodes: &mut [Node], read: usize, write: usize) -> (&Node, &mut Node) {
    assert_ne!(read, write);
    if read < write {
        let (lo, hi) = nodes.split_at_mut(write);
        (&lo[read], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(read);
        (&hi[0], &mut lo[write])
    }
}

/// Visit each 1-D lane along `axis` of a row-major tensor as
/// (start, stride, len).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for s in 0..stride {
            f(o * len * stride + s, stride, len);
        }
    }
}

fn softmax_lane(data: &mut [f64], start: usize, stride: usize, len: usize) {
    let mut max = f64::NEG_INFINITY;
    for i in 0..len {
        max = max.max(data[start + i * stride]);
    }
    let mut sum = 0.0;
    for i in 0..len {
        let idx = start + i * stride;
        data[idx] = (data[idx] - max).exp();
        sum += data[idx];
    }
    for i in 0..len {
        data[start + i * stride] /= sum;
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let inner = c * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_C * x * x)
}

// ── gradient checking ───────────────────────────────────────────────────

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar-valued function of one tensor.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, input: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input, true);
    let y = f(&mut tape, x);
    tape.backward(y);
    let analytic = tape.grad(x).to_vec();

    let mut max_err: f64 = 0.0;
    for i in 0..input.numel() {
        let mut lo = input.clone();
        lo.data_mut()[i] -= step;
        let mut hi = input.clone();
        hi.data_mut()[i] += step;
        let f_lo = eval_scalar(&f, &lo);
        let f_hi = eval_scalar(&f, &hi);
        let numeric = (f_hi - f_lo) / (2.0 * step);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    max_err
}

fn eval_scalar<F>(f: &F, input: &Tensor) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input, false);
    let y = f(&mut tape, x);
    tape.scalar_value(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut StdRng, shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]), false);
        let i2 = tape.leaf(&Tensor::eye(2), false);
        let c = tape.matmul(a, i2);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let col = tape.leaf(&Tensor::matrix(2, 1, vec![5.0, 7.0]), false);
        let d = tape.matmul(i2, col);
        assert_eq!(tape.value(d), &[5.0, 7.0]);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 3, vec![0.0; 6]), false);
        let b = tape.leaf(&Tensor::matrix(2, 2, vec![0.0; 4]), false);
        tape.matmul(a, b);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(1);
        let b = rand_tensor(&mut rng, vec![3, 4]);
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let err = grad_check(
            |tape, x| {
                let bv = tape.leaf(&b, false);
                let c = tape.matmul(x, bv);
                tape.sum_all(c)
            },
            &a,
            1e-5,
        );
        assert!(err < 1e-6, "matmul grad err {}", err);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.0, 0.0, 0.0]), false);
        let y = tape.softmax(x, 0);
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let a = tape.leaf(&Tensor::vector(vec![0.3, 0.5, 0.7]), false);
        let sa = tape.softmax(a, 0);
        let b = tape.leaf(&Tensor::vector(vec![0.3 + 5.0, 0.5 + 5.0, 0.7 + 5.0]), false);
        let sb = tape.softmax(b, 0);
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb).to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..10 {
            let t = rand_tensor(&mut rng, vec![4, 6]);
            let mut tape = Tape::new();
            let x = tape.leaf(&t, false);
            let y = tape.softmax(x, 1);
            let v = tape.value(y);
            for r in 0..4 {
                let row = &v[r * 6..(r + 1) * 6];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![3, 5]);
        let w = rand_tensor(&mut rng, vec![3, 5]);
        let err = grad_check(
            |tape, v| {
                let s = tape.softmax(v, 1);
                let wv = tape.leaf(&w, false);
                let p = tape.mul(s, wv);
                tape.sum_all(p)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "softmax grad err {}", err);
    }

    #[test]
    fn elementwise_add_and_gelu() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]), false);
        let b = tape.leaf(&Tensor::vector(vec![3.0, 4.0]), false);
        let c = tape.add(a, b);
        assert_eq!(tape.value(c), &[4.0, 6.0]);

        let z = tape.leaf(&Tensor::vector(vec![0.0]), false);
        let g = tape.gelu(z);
        assert_eq!(tape.value(g), &[0.0]);
    }

    #[test]
    #[should_panic(expected = "elementwise shape mismatch")]
    fn elementwise_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 2.0]), false);
        let b = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]), false);
        tape.add(a, b);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, vec![10]);
        let err = grad_check(
            |tape, v| {
                let g = tape.gelu(v);
                tape.sum_all(g)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-5, "gelu grad err {}", err);
    }

    #[test]
    fn reduce_mean_single_row_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]), false);
        let m = tape.reduce_axis(Reduce::Mean, a, 0);
        assert_eq!(tape.value(m), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.shape(m), &[4]);
    }

    #[test]
    fn reduce_max_value_and_tie_break() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![1.0, 5.0, 3.0]), true);
        let m = tape.reduce_axis(Reduce::Max, a, 0);
        assert_eq!(tape.value(m), &[5.0]);

        // ties route to the lowest index
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(vec![2.0, 7.0, 7.0]), true);
        let m = tape.reduce_axis(Reduce::Max, a, 0);
        tape.backward(m);
        assert_eq!(tape.grad(a), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_mean_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let w = rand_tensor(&mut rng, vec![3]);
        let err = grad_check(
            |tape, v| {
                let m = tape.reduce_axis(Reduce::Mean, v, 0);
                let wv = tape.leaf(&w, false);
                let p = tape.mul(m, wv);
                tape.sum_all(p)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "mean grad err {}", err);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(1, 4, vec![3.0; 4]), false);
        let gain = tape.leaf(&Tensor::vector(vec![1.0; 4]), false);
        let bias = tape.leaf(&Tensor::vector(vec![0.0; 4]), false);
        let y = tape.layer_norm(x, gain, bias);
        for &v in tape.value(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_output_mean_equals_bias_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 10.0]), false);
        let gain = tape.leaf(&Tensor::vector(vec![1.0; 4]), false);
        let bias = tape.leaf(&Tensor::vector(vec![0.5, 1.5, -1.0, 2.0]), false);
        let y = tape.layer_norm(x, gain, bias);
        let out_mean: f64 = tape.value(y).iter().sum::<f64>() / 4.0;
        let bias_mean: f64 = (0.5 + 1.5 - 1.0 + 2.0) / 4.0;
        assert!((out_mean - bias_mean).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, vec![3, 6]);
        let gain = rand_tensor(&mut rng, vec![6]);
        let bias = rand_tensor(&mut rng, vec![6]);
        let w = rand_tensor(&mut rng, vec![3, 6]);
        // wrt input
        let err = grad_check(
            |tape, v| {
                let g = tape.leaf(&gain, false);
                let b = tape.leaf(&bias, false);
                let y = tape.layer_norm(v, g, b);
                let wv = tape.leaf(&w, false);
                let p = tape.mul(y, wv);
                tape.sum_all(p)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-5, "layer_norm input grad err {}", err);
        // wrt gain
        let err = grad_check(
            |tape, v| {
                let xv = tape.leaf(&x, false);
                let b = tape.leaf(&bias, false);
                let y = tape.layer_norm(xv, v, b);
                let wv = tape.leaf(&w, false);
                let p = tape.mul(y, wv);
                tape.sum_all(p)
            },
            &gain,
            1e-5,
        );
        assert!(err < 1e-5, "layer_norm gain grad err {}", err);
    }

    #[test]
    fn cross_entropy_uniform_and_margin() {
        let mut tape = Tape::new();
        let k = 7;
        let s = tape.leaf(&Tensor::vector(vec![0.4; k]), false);
        let l = tape.cross_entropy(s, 3);
        assert!((tape.scalar_value(l) - (k as f64).ln()).abs() < 1e-12);

        let mut scores = vec![0.0; 5];
        scores[2] = 50.0;
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::vector(scores), false);
        let l = tape.cross_entropy(s, 2);
        assert!(tape.scalar_value(l) < 1e-6);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::vector(vec![0.0; 3]), false);
        tape.cross_entropy(s, 3);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_one_hot() {
        let scores = Tensor::vector(vec![0.2, -0.7, 1.3, 0.0]);
        let mut tape = Tape::new();
        let s = tape.leaf(&scores, true);
        let l = tape.cross_entropy(s, 2);
        tape.backward(l);
        let g = tape.grad(s).to_vec();

        // analytic: softmax - one_hot
        let max = 1.3;
        let exps: Vec<f64> = scores.data().iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, &e) in exps.iter().enumerate() {
            let expected = e / z - if j == 2 { 1.0 } else { 0.0 };
            assert!((g[j] - expected).abs() < 1e-12);
        }

        let err = grad_check(|tape, v| tape.cross_entropy(v, 2), &scores, 1e-5);
        assert!(err < 1e-6, "cross_entropy grad err {}", err);
    }

    #[test]
    fn backward_sum_gives_ones_and_quadratic_gives_2x() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let s = tape.sum_all(v);
        tape.backward(s);
        assert_eq!(tape.grad(v), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let sq = tape.mul(v, v);
        let s = tape.sum_all(sq);
        tape.backward(s);
        assert_eq!(tape.grad(v), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_over_shared_consumers() {
        // y = sum(x) + sum(x ⊙ x): dy/dx = 1 + 2x
        let x = Tensor::vector(vec![0.5, -1.5]);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let s1 = tape.sum_all(v);
        let sq = tape.mul(v, v);
        let s2 = tape.sum_all(sq);
        let y = tape.add(s1, s2);
        tape.backward(y);
        assert_eq!(tape.grad(v), &[2.0, -2.0]);
    }

    #[test]
    #[should_panic(expected = "backward() called twice")]
    fn backward_twice_without_reset_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::vector(vec![1.0]), true);
        let s = tape.sum_all(v);
        tape.backward(s);
        tape.backward(s);
    }

    #[test]
    fn backward_after_zero_grads_is_allowed() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::vector(vec![2.0]), true);
        let s = tape.sum_all(v);
        tape.backward(s);
        tape.zero_grads();
        tape.backward(s);
        assert_eq!(tape.grad(v), &[1.0]);
    }

    #[test]
    #[should_panic(expected = "non-scalar loss")]
    fn backward_on_non_scalar_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::vector(vec![1.0, 2.0]), true);
        tape.backward(v);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let w = Tensor::vector(vec![0.3, -1.2, 2.2]);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |tape, v| {
                let wv = tape.leaf(&w, false);
                tape.dot(v, wv)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-9, "linear grad err {}", err);
    }

    #[test]
    fn grad_check_softmax_cross_entropy_composite() {
        let mut rng = StdRng::seed_from_u64(7);
        for seed in 0..10u64 {
            let _ = seed;
            let x = rand_tensor(&mut rng, vec![6]);
            let err = grad_check(|tape, v| tape.cross_entropy(v, 1), &x, 1e-5);
            assert!(err < 1e-6, "softmax+CE grad err {}", err);
        }
    }

    #[test]
    fn transpose_and_slice_and_concat_gradients() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w = rand_tensor(&mut rng, vec![4, 3]);
        let err = grad_check(
            |tape, v| {
                let t = tape.transpose(v);
                let wv = tape.leaf(&w, false);
                let p = tape.mul(t, wv);
                tape.sum_all(p)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-9, "transpose grad err {}", err);

        let err = grad_check(
            |tape, v| {
                let top = tape.slice_rows(v, 0, 2);
                let bottom = tape.slice_rows(v, 1, 2);
                let cat = tape.concat_rows(top, bottom);
                let sq = tape.mul(cat, cat);
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "slice/concat grad err {}", err);
    }

    #[test]
    fn stack_scalars_routes_gradients() {
        let x = Tensor::vector(vec![0.1, 0.9, -0.4]);
        let err = grad_check(
            |tape, v| {
                let a = tape.slice_scalar(v, 0);
                let b = tape.slice_scalar(v, 1);
                let c = tape.slice_scalar(v, 2);
                let stacked = tape.stack_scalars(&[a, b, c]);
                tape.cross_entropy(stacked, 0)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "stack_scalars grad err {}", err);
    }

    #[test]
    fn ops_are_deterministic() {
        let mut rng = StdRng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, vec![5, 5]);
        let b = rand_tensor(&mut rng, vec![5, 5]);
        let run = || {
            let mut tape = Tape::new();
            let av = tape.leaf(&a, true);
            let bv = tape.leaf(&b, false);
            let c = tape.matmul(av, bv);
            let s = tape.softmax(c, 1);
            let l = tape.sum_all(s);
            tape.backward(l);
            (tape.value(s).to_vec(), tape.grad(av).to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
