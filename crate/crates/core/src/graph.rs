//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Every node is a `rows × cols` matrix (vectors are `1 × n`, scalars `1 × 1`).
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{DreamError, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, transpose, Tensor};

/// Handle to a node in a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations addressable through [`ComputeGraph::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sigmoid,
    Relu,
    Tanh,
    Concat,
    Scale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    Bce {
        probs: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        eps: f64,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of one forward computation.
#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: Vec<(usize, Var)>,
    param_vars: HashMap<usize, Var>,
}

/// Gradients produced by [`ComputeGraph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if unreachable.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// `(parameter id, gradient)` for every registered parameter, in
    /// registration order. Unreached parameters are omitted.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, var)| self.get(var).map(|g| (id, g)))
    }
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.rows * n.cols != 1 {
            return Err(DreamError::Contract(format!(
                "expected scalar node, found {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape_of(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(DreamError::shape("constant", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    /// Differentiable leaf that is not tracked as a parameter.
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(DreamError::shape("variable", &[rows, cols], &[data.len()]));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, true))
    }

    /// Registers parameter `id` as a differentiable leaf. Registering the same
    /// id twice returns the existing node.
    pub fn param(&mut self, id: usize, tensor: &Tensor) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(
            tensor.rows(),
            tensor.cols(),
            tensor.data().to_vec(),
            Op::Leaf,
            true,
        );
        self.params.push((id, v));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape_of(a);
        let [k2, n] = self.shape_of(b);
        if k != k2 {
            return Err(DreamError::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let [m, n] = self.shape_of(a);
        let out = transpose(self.value(a), m, n);
        let rg = self.rg(a);
        self.push(n, m, out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let [m, n] = self.shape_of(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let [m, n] = self.shape_of(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(m, n, out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 × n` bias to every row of an `m × n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [m, n] = self.shape_of(x);
        let [br, bc] = self.shape_of(bias);
        if br != 1 || bc != n {
            return Err(DreamError::shape("add_row_bias", &[m, n], &[br, bc]));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(m, n, out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let [m, n] = self.shape_of(x);
        let rg = self.rg(x);
        self.push(m, n, out, Op::Scale(x, c), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.unary(x, out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.unary(x, out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.unary(x, out, Op::Relu(x))
    }

    fn unary(&mut self, x: Var, out: Vec<f64>, op: Op) -> Var {
        let [m, n] = self.shape_of(x);
        let rg = self.rg(x);
        self.push(m, n, out, op, rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_rows_masked(x, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Row-wise softmax where columns with `key_mask[j] == false` receive
    /// exactly zero weight.
    pub fn softmax_rows_masked(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let [m, n] = self.shape_of(x);
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(DreamError::shape("softmax_rows", &[m, n], &[mask.len()]));
            }
            if !mask.iter().any(|&k| k) {
                return Err(DreamError::input("softmax row has every column masked"));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mask| mask[j]);
        let mut out = vec![0.0; m * n];
        for (row, dst) in self.value(x).chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, dst, keep);
        }
        Ok(self.unary(x, out, Op::Softmax(x)))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (both `1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [m, n] = self.shape_of(x);
        for p in [gamma, beta] {
            let s = self.shape_of(p);
            if s != [1, n] {
                return Err(DreamError::shape("layer_norm", &[m, n], &s));
            }
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        let (g, b) = (self.value(gamma), self.value(beta));
        for (r, row) in self.value(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Horizontal concatenation of equal-height matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DreamError::input("concat of zero tensors"))?;
        let m = self.shape_of(first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape_of(p);
            if s[0] != m {
                return Err(DreamError::shape("concat_cols", &self.shape_of(first), &s));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let n = self.nodes[p.0].cols;
                out.extend_from_slice(&self.value(p)[r * n..(r + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(m, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical concatenation of equal-width matrices.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DreamError::input("concat of zero tensors"))?;
        let n = self.shape_of(first)[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape_of(p);
            if s[1] != n {
                return Err(DreamError::shape("concat_rows", &self.shape_of(first), &s));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(rows, n, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape_of(x);
        if start + len > n || len == 0 {
            return Err(DreamError::shape("slice_cols", &[m, n], &[start, len]));
        }
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(m, len, out, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape_of(x);
        if start + len > m || len == 0 {
            return Err(DreamError::shape("slice_rows", &[m, n], &[start, len]));
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(len, n, out, Op::SliceRows { x, start }, rg))
    }

    /// Embedding lookup: output row `r` is row `ids[r]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let [m, n] = self.shape_of(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(DreamError::input(format!(
                "row id {bad} out of range for table with {m} rows"
            )));
        }
        if ids.is_empty() {
            return Err(DreamError::input("gather of zero rows"));
        }
        let t = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| t[i * n..(i + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(table);
        Ok(self.push(
            ids.len(),
            n,
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Column means: `m × n` to `1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let [m, n] = self.shape_of(x);
        let mut out = vec![0.0; n];
        for row in self.value(x).chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(x);
        self.push(1, n, out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(1, 1, vec![s], Op::Sum(x), rg)
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Identity
    /// when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DreamError::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, k)| v * k).collect();
        Ok(self.unary(x, out, Op::MulConst(x, mask)))
    }

    /// Weighted sum of clamped binary cross-entropies over a row of
    /// probabilities: `Σ wⱼ · −[yⱼ ln p̃ⱼ + (1 − yⱼ) ln(1 − p̃ⱼ)]` with
    /// `p̃ = clamp(p, eps, 1 − eps)`.
    pub fn bce_sum(&mut self, probs: Var, targets: &[f64], weights: &[f64], eps: f64) -> Result<Var> {
        let [m, n] = self.shape_of(probs);
        if m * n != targets.len() || targets.len() != weights.len() {
            return Err(DreamError::shape("bce", &[m, n], &[targets.len(), weights.len()]));
        }
        let loss = self
            .value(probs)
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&p, &y), &w)| w * bce_clamped(p, y, eps))
            .sum();
        let rg = self.rg(probs);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the listed `(row, class)` targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let [m, n] = self.shape_of(logits);
        if targets.is_empty() {
            return Err(DreamError::input("cross-entropy with no target positions"));
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(DreamError::shape("softmax_cross_entropy", &[m, n], &[r, c]));
        }
        let x = self.value(logits);
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut loss = 0.0;
        for &(r, c) in targets {
            let mut p = vec![0.0; n];
            softmax_row(&x[r * n..(r + 1) * n], &mut p, |_| true);
            loss -= p[c].max(f64::MIN_POSITIVE).ln();
            probs.extend(p);
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Dispatch for the generic elementwise family.
    pub fn elementwise(&mut self, op: ElementwiseOp, operands: &[Var]) -> Result<Var> {
        let arity = |k: usize| -> Result<()> {
            if operands.len() == k {
                Ok(())
            } else {
                Err(DreamError::input(format!(
                    "{op:?} expects {k} operands, got {}",
                    operands.len()
                )))
            }
        };
        match op {
            ElementwiseOp::Add => {
                arity(2)?;
                self.add(operands[0], operands[1])
            }
            ElementwiseOp::Mul => {
                arity(2)?;
                self.mul(operands[0], operands[1])
            }
            ElementwiseOp::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(operands[0]))
            }
            ElementwiseOp::Relu => {
                arity(1)?;
                Ok(self.relu(operands[0]))
            }
            ElementwiseOp::Tanh => {
                arity(1)?;
                Ok(self.tanh(operands[0]))
            }
            ElementwiseOp::Concat => self.concat_cols(operands),
            ElementwiseOp::Scale(c) => {
                arity(1)?;
                Ok(self.scale(operands[0], c))
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(DreamError::shape(op, &sa, &sb));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. The graph itself is not mutated,
    /// so repeated calls yield bitwise-identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.rows * node.cols != 1 {
            return Err(DreamError::Contract(format!(
                "backward requires a scalar loss, got {}x{}",
                node.rows, node.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [_, k] = self.shape_of(*a);
                if self.rg(*a) {
                    matmul_nt_into(g, self.value(*b), self.acc(grads, *a), m, n, k);
                }
                if self.rg(*b) {
                    matmul_tn_into(self.value(*a), g, self.acc(grads, *b), k, m, n);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let gt = transpose(g, m, n);
                    add_into(self.acc(grads, *a), &gt);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(self.acc(grads, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = self.value(*b);
                    let dst = self.acc(grads, *a);
                    for ((d, g), o) in dst.iter_mut().zip(g).zip(other) {
                        *d += g * o;
                    }
                }
                if self.rg(*b) {
                    let other = self.value(*a);
                    let dst = self.acc(grads, *b);
                    for ((d, g), o) in dst.iter_mut().zip(g).zip(other) {
                        *d += g * o;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.rg(*x) {
                    add_into(self.acc(grads, *x), g);
                }
                if self.rg(*bias) {
                    let dst = self.acc(grads, *bias);
                    for row in g.chunks(n) {
                        add_into(dst, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let dst = self.acc(grads, *x);
                    for (d, g) in dst.iter_mut().zip(g) {
                        *d += g * c;
                    }
                }
            }
            Op::MulConst(x, mask) => {
                if self.rg(*x) {
                    let dst = self.acc(grads, *x);
                    for ((d, g), k) in dst.iter_mut().zip(g).zip(mask) {
                        *d += g * k;
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let dst = self.acc(grads, *x);
                    for ((d, g), y) in dst.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let dst = self.acc(grads, *x);
                    for ((d, g), y) in dst.iter_mut().zip(g).zip(y) {
                        *d += g * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let input = self.value(*x);
                    let dst = self.acc(grads, *x);
                    for ((d, g), v) in dst.iter_mut().zip(g).zip(input) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let y = &node.value;
                    let dst = self.acc(grads, *x);
                    for r in 0..m {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.rg(*gamma) {
                    let dst = self.acc(grads, *gamma);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dst[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let dst = self.acc(grads, *beta);
                    for gr in g.chunks(n) {
                        add_into(dst, gr);
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).to_vec();
                    let dst = self.acc(grads, *x);
                    let nf = n as f64;
                    for r in 0..m {
                        let (gr, hr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let dxhat: Vec<f64> = gr.iter().zip(&gam).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[r * n + j] +=
                                inv_std[r] / nf * (nf * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p.0].cols;
                    if self.rg(p) {
                        let dst = self.acc(grads, p);
                        for r in 0..m {
                            add_into(
                                &mut dst[r * pc..(r + 1) * pc],
                                &g[r * n + offset..r * n + offset + pc],
                            );
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.rg(p) {
                        add_into(self.acc(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let xn = self.nodes[x.0].cols;
                    let dst = self.acc(grads, *x);
                    for r in 0..m {
                        add_into(
                            &mut dst[r * xn + start..r * xn + start + n],
                            &g[r * n..(r + 1) * n],
                        );
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let dst = self.acc(grads, *x);
                    add_into(&mut dst[start * n..(start + m) * n], g);
                }
            }
            Op::GatherRows { table, ids } => {
                if self.rg(*table) {
                    let dst = self.acc(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dst[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.rg(*x) {
                    let xm = self.nodes[x.0].rows;
                    let scale = 1.0 / xm as f64;
                    let dst = self.acc(grads, *x);
                    for row in dst.chunks_mut(n) {
                        for (d, g) in row.iter_mut().zip(g) {
                            *d += g * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let dst = self.acc(grads, *x);
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Bce {
                probs,
                targets,
                weights,
                eps,
            } => {
                if self.rg(*probs) {
                    let p = self.value(*probs);
                    let dst = self.acc(grads, *probs);
                    for j in 0..p.len() {
                        if p[j] > *eps && p[j] < 1.0 - eps {
                            let y = targets[j];
                            dst[j] += g[0] * weights[j] * (-y / p[j] + (1.0 - y) / (1.0 - p[j]));
                        }
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                if self.rg(*logits) {
                    let vn = self.nodes[logits.0].cols;
                    let scale = g[0] / targets.len() as f64;
                    let dst = self.acc(grads, *logits);
                    for (t, &(r, c)) in targets.iter().enumerate() {
                        let p = &probs[t * vn..(t + 1) * vn];
                        for j in 0..vn {
                            let onehot = if j == c { 1.0 } else { 0.0 };
                            dst[r * vn + j] += scale * (p[j] - onehot);
                        }
                    }
                }
            }
        }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clamped binary cross-entropy of a single probability.
pub fn bce_clamped(p: f64, y: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn softmax_row(row: &[f64], dst: &mut [f64], keep: impl Fn(usize) -> bool) {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (j, (d, &v)) in dst.iter_mut().zip(row).enumerate() {
        *d = if keep(j) { (v - max).exp() } else { 0.0 };
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}
