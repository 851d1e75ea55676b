//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, so the node list is already a topological order and
//! [`Graph::backward`] only has to walk it in reverse. A graph is built for one
//! forward pass and dropped afterwards.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{mm, mm_at, mm_bt};
use super::{DiffError, Tensor};

/// Additive logit offset marking a position as excluded from a softmax.
pub const MASK_VALUE: f64 = -1e30;
/// Inputs at or below this value are treated as masked by [`Graph::softmax`].
pub const MASK_CUTOFF: f64 = -1e29;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Hadamard(usize, usize),
    BroadcastAdd(usize, usize),
    BroadcastMul(usize, usize),
    ScaleRows(usize, usize),
    Transpose(usize),
    Affine(usize, f64),
    MulConst(usize, Vec<f64>),
    AddConst(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Ln(usize),
    Softmax(usize, usize),
    SumAxis(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        frozen: Option<usize>,
    },
    Row(usize, usize),
    WeightNorm {
        direction: usize,
        gain: usize,
    },
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    SoftmaxXent {
        logits: usize,
        target: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// The tape of one forward pass.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::detached()
    }
}

impl<'p> Graph<'p> {
    /// A graph whose [`Graph::param`] nodes read from `store`.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph without parameters; only inputs and leaves.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v.0).shape()
    }

    fn val(&self, i: usize) -> &Tensor {
        let node = &self.nodes[i];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .store
                .expect("parameter node without a store")
                .get(*id),
            (None, _) => unreachable!("node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |i: &usize| self.nodes[*i].needs_grad;
        match op {
            Op::Input => false,
            Op::Leaf | Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Hadamard(a, b)
            | Op::BroadcastAdd(a, b)
            | Op::BroadcastMul(a, b)
            | Op::ScaleRows(a, b) => ng(a) || ng(b),
            Op::WeightNorm { direction, gain } => ng(direction) || ng(gain),
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::MulConst(a, _)
            | Op::AddConst(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Ln(a)
            | Op::Softmax(a, _)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Reshape(a)
            | Op::Row(a, _) => ng(a),
            Op::GatherRows { table, .. } => ng(table),
            Op::BceWithLogits { logits, .. } | Op::SoftmaxXent { logits, .. } => ng(logits),
            Op::Concat(parts, _) => parts.iter().any(ng),
        }
    }

    /// A constant input; gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Input, "input")
    }

    /// A free variable whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, DiffError> {
        self.push(t, Op::Leaf, "leaf")
    }

    /// A node reading parameter `id` from the store. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&i) = self.param_nodes.get(&id) {
            return Var(i);
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes.insert(id, i);
        Var(i)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), DiffError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(DiffError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(DiffError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "add")?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(t, Op::Add(a.0, b.0), "add")
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "hadamard")?;
        let t = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(t, Op::Hadamard(a.0, b.0), "hadamard")
    }

    fn check_row_broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize), DiffError> {
        let (n, d) = self.dims2(a, op)?;
        if self.value(b).len() != d || self.value(b).rank() > 2 || self.value(b).rows() != 1 {
            return Err(DiffError::Shape {
                op,
                left: vec![n, d],
                right: self.shape(b).to_vec(),
            });
        }
        Ok((n, d))
    }

    /// Adds the vector `b[d]` to every row of `a[n×d]`.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (n, d) = self.check_row_broadcast(a, b, "broadcast_add")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n * d).map(|i| av[i] + bv[i % d]).collect();
        self.push(Tensor::new(vec![n, d], out)?, Op::BroadcastAdd(a.0, b.0), "broadcast_add")
    }

    /// Multiplies every row of `a[n×d]` elementwise by the vector `b[d]`.
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (n, d) = self.check_row_broadcast(a, b, "broadcast_mul")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = (0..n * d).map(|i| av[i] * bv[i % d]).collect();
        self.push(Tensor::new(vec![n, d], out)?, Op::BroadcastMul(a.0, b.0), "broadcast_mul")
    }

    /// Scales row `i` of `a[n×d]` by `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Result<Var, DiffError> {
        let (n, d) = self.dims2(a, "scale_rows")?;
        if self.value(w).len() != n {
            return Err(DiffError::Shape {
                op: "scale_rows",
                left: vec![n, d],
                right: self.shape(w).to_vec(),
            });
        }
        let (av, wv) = (self.value(a).data(), self.value(w).data());
        let out: Vec<f64> = (0..n * d).map(|i| av[i] * wv[i / d]).collect();
        self.push(Tensor::new(vec![n, d], out)?, Op::ScaleRows(a.0, w.0), "scale_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let (n, d) = self.dims2(a, "transpose")?;
        let out = transpose_data(self.value(a).data(), n, d);
        self.push(Tensor::new(vec![d, n], out)?, Op::Transpose(a.0), "transpose")
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let t = self.value(a).map(|x| scale * x + shift);
        self.push(t, Op::Affine(a.0, scale), "affine")
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var, DiffError> {
        if self.shape(a) != c.shape() {
            return Err(DiffError::Shape {
                op: "mul_const",
                left: self.shape(a).to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let t = zip_map(self.value(a), c, |x, y| x * y);
        self.push(t, Op::MulConst(a.0, c.data().to_vec()), "mul_const")
    }

    /// Elementwise sum with a constant tensor (additive attention masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var, DiffError> {
        if self.shape(a) != c.shape() {
            return Err(DiffError::Shape {
                op: "add_const",
                left: self.shape(a).to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let t = zip_map(self.value(a), c, |x, y| x + y);
        self.push(t, Op::AddConst(a.0), "add_const")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu(a.0), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a.0), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a.0), "tanh")
    }

    /// Natural logarithm; nonpositive inputs surface as a non-finite error.
    pub fn ln(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a).map(f64::ln);
        self.push(t, Op::Ln(a.0), "ln")
    }

    /// Softmax along `axis` with max-subtraction.
    ///
    /// Entries at or below [`MASK_CUTOFF`] are masked and come out as exactly 0.
    /// A lane whose entries are all masked is an error.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        let lanes = lanes(x.shape(), axis, "softmax")?;
        let mut out = vec![0.0; x.len()];
        let xd = x.data();
        for lane in &lanes {
            let max = lane
                .iter()
                .map(|&i| xd[i])
                .filter(|&v| v > MASK_CUTOFF)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(DiffError::DegenerateMask { op: "softmax" });
            }
            let mut total = 0.0;
            for &i in lane {
                if xd[i] > MASK_CUTOFF {
                    let e = (xd[i] - max).exp();
                    out[i] = e;
                    total += e;
                }
            }
            for &i in lane {
                out[i] /= total;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a.0, axis), "softmax")
    }

    /// Sum along `axis`: a matrix reduces to a vector, a vector to a scalar.
    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let t = match (shape.len(), axis) {
            (1, 0) => Tensor::scalar(x.sum()),
            (2, 0) => {
                let (n, d) = (shape[0], shape[1]);
                let mut out = vec![0.0; d];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(x.row(i)) {
                        *o += v;
                    }
                }
                Tensor::new(vec![d], out)?
            }
            (2, 1) => {
                let n = shape[0];
                Tensor::new(vec![n], (0..n).map(|i| x.row(i).iter().sum()).collect())?
            }
            (rank, axis) => {
                return Err(DiffError::Axis {
                    op: "reduce_sum",
                    axis,
                    rank,
                })
            }
        };
        self.push(t, Op::SumAxis(a.0, axis), "reduce_sum")
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::SumAll(a.0), "sum")
    }

    /// Concatenates vectors (axis 0) or matrices (axis 0 stacks rows, axis 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = *parts.first().ok_or(DiffError::Contract("concat of zero parts".into()))?;
        let rank = self.value(first).rank();
        let shape_err = |g: &Self, p: &Var| DiffError::Shape {
            op: "concat",
            left: g.shape(first).to_vec(),
            right: g.shape(*p).to_vec(),
        };
        for p in parts {
            if self.value(*p).rank() != rank {
                return Err(shape_err(self, p));
            }
        }
        let t = match (rank, axis) {
            (1, 0) => {
                let data: Vec<f64> = parts
                    .iter()
                    .flat_map(|p| self.value(*p).data().iter().copied())
                    .collect();
                Tensor::vector(data)
            }
            (2, 0) => {
                let d = self.value(first).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let v = self.value(*p);
                    if v.cols() != d {
                        return Err(shape_err(self, p));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::new(vec![rows, d], data)?
            }
            (2, 1) => {
                let n = self.value(first).rows();
                for p in parts {
                    if self.value(*p).rows() != n {
                        return Err(shape_err(self, p));
                    }
                }
                let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                let mut data = Vec::with_capacity(n * total);
                for i in 0..n {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
                Tensor::new(vec![n, total], data)?
            }
            (rank, axis) => return Err(DiffError::Axis { op: "concat", axis, rank }),
        };
        let idx = parts.iter().map(|p| p.0).collect();
        self.push(t, Op::Concat(idx, axis), "concat")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a.0), "reshape")
    }

    /// Rows `ids` of `table[V×d]` as an `n×d` matrix. Row `frozen`, when given,
    /// receives no gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], frozen: Option<usize>) -> Result<Var, DiffError> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(DiffError::Contract("gather_rows with no ids".into()));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(DiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push(
            t,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
                frozen,
            },
            "gather_rows",
        )
    }

    /// Row `i` of a matrix as a `1×d` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, DiffError> {
        let (n, d) = self.dims2(a, "row")?;
        if i >= n {
            return Err(DiffError::IndexOutOfRange {
                op: "row",
                index: i,
                bound: n,
            });
        }
        let t = Tensor::new(vec![1, d], self.value(a).row(i).to_vec())?;
        self.push(t, Op::Row(a.0, i), "row")
    }

    /// Weight-normalized matrix: column `j` is `gain[j] * direction[:, j] / ‖direction[:, j]‖`.
    /// A zero direction column yields a zero column.
    pub fn weight_norm(&mut self, direction: Var, gain: Var) -> Result<Var, DiffError> {
        let (rows, cols) = self.dims2(direction, "weight_norm")?;
        if self.value(gain).len() != cols {
            return Err(DiffError::Shape {
                op: "weight_norm",
                left: vec![rows, cols],
                right: self.shape(gain).to_vec(),
            });
        }
        let dv = self.value(direction).data();
        let gv = self.value(gain).data();
        let norms = column_norms(dv, rows, cols);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                if norms[j] > NORM_FLOOR {
                    out[i * cols + j] = gv[j] * dv[i * cols + j] / norms[j];
                }
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(
            t,
            Op::WeightNorm {
                direction: direction.0,
                gain: gain.0,
            },
            "weight_norm",
        )
    }

    /// Mean over classes of binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, DiffError> {
        let x = self.value(logits);
        if x.len() != targets.len() {
            return Err(DiffError::Shape {
                op: "bce_with_logits",
                left: x.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(DiffError::Contract(format!("target {t} outside [0, 1]")));
        }
        let k = targets.len() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / k;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Negative log-likelihood of class `target` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, DiffError> {
        let x = self.value(logits).data();
        if target >= x.len() {
            return Err(DiffError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: target,
                bound: x.len(),
            });
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[target];
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: logits.0,
                target,
            },
            "softmax_cross_entropy",
        )
    }

    /// Runs the chain rule from the scalar `loss` back to every leaf and parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                op => self.propagate(idx, op, &g, &mut grads)?,
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            let shape = self.val(idx).shape().to_vec();
            match node.op {
                Op::Param(id) => {
                    let data = grads[idx].take().unwrap_or_else(|| vec![0.0; self.val(idx).len()]);
                    out.params.push((id, Tensor::new(shape, data)?));
                }
                Op::Leaf => {
                    let data = grads[idx].take().unwrap_or_else(|| vec![0.0; self.val(idx).len()]);
                    out.leaves.insert(idx, Tensor::new(shape, data)?);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), DiffError> {
        let out = self.val(idx);
        let wants = |i: usize| self.nodes[i].needs_grad;
        match op {
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    accumulate(grads, *a, &mm_bt(g, bv.data(), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, &mm_at(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::BroadcastAdd(a, b) => {
                let d = self.val(*b).len();
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, &column_sums(g, d));
                }
            }
            Op::BroadcastMul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let d = bv.len();
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * bv[i % d]).collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &column_sums(&prod, d));
                }
            }
            Op::ScaleRows(a, w) => {
                let (av, wv) = (self.val(*a).data(), self.val(*w).data());
                let d = self.val(*a).cols();
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * wv[i / d]).collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*w) {
                    let gw: Vec<f64> = (0..wv.len())
                        .map(|r| (0..d).map(|c| g[r * d + c] * av[r * d + c]).sum())
                        .collect();
                    accumulate(grads, *w, &gw);
                }
            }
            Op::Transpose(a) => {
                // out is d×n; its gradient transposed back is n×d
                let (d, n) = (out.rows(), out.cols());
                accumulate(grads, *a, &transpose_data(g, d, n));
            }
            Op::Affine(a, scale) => {
                let ga: Vec<f64> = g.iter().map(|x| x * scale).collect();
                accumulate(grads, *a, &ga);
            }
            Op::MulConst(a, c) => {
                let ga: Vec<f64> = g.iter().zip(c).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, &ga);
            }
            Op::AddConst(a) | Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Ln(a) => {
                let ga: Vec<f64> = g.iter().zip(self.val(*a).data()).map(|(x, y)| x / y).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Softmax(a, axis) => {
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for lane in lanes(out.shape(), *axis, "softmax")? {
                    let dot: f64 = lane.iter().map(|&i| g[i] * y[i]).sum();
                    for &i in &lane {
                        ga[i] = y[i] * (g[i] - dot);
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::SumAxis(a, axis) => {
                let x = self.val(*a);
                let ga: Vec<f64> = match (x.rank(), axis) {
                    (1, 0) => vec![g[0]; x.len()],
                    (2, 0) => {
                        let d = x.cols();
                        (0..x.len()).map(|i| g[i % d]).collect()
                    }
                    _ => {
                        let d = x.cols();
                        (0..x.len()).map(|i| g[i / d]).collect()
                    }
                };
                accumulate(grads, *a, &ga);
            }
            Op::SumAll(a) => {
                let n = self.val(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Concat(parts, axis) => {
                if *axis == 1 && out.rank() == 2 {
                    let (n, total) = (out.rows(), out.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.val(p).cols();
                        if wants(p) {
                            let gp: Vec<f64> = (0..n)
                                .flat_map(|i| g[i * total + offset..i * total + offset + w].iter().copied())
                                .collect();
                            accumulate(grads, p, &gp);
                        }
                        offset += w;
                    }
                } else {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.val(p).len();
                        if wants(p) {
                            accumulate(grads, p, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
            }
            Op::GatherRows { table, ids, frozen } => {
                let tv = self.val(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    if Some(id) == *frozen {
                        continue;
                    }
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
                accumulate(grads, *table, &gt);
            }
            Op::Row(a, i) => {
                let x = self.val(*a);
                let d = x.cols();
                let mut ga = vec![0.0; x.len()];
                ga[i * d..(i + 1) * d].copy_from_slice(g);
                accumulate(grads, *a, &ga);
            }
            Op::WeightNorm { direction, gain } => {
                let dv = self.val(*direction);
                let (rows, cols) = (dv.rows(), dv.cols());
                let dd = dv.data();
                let gv = self.val(*gain).data();
                let norms = column_norms(dd, rows, cols);
                let mut g_dir = vec![0.0; rows * cols];
                let mut g_gain = vec![0.0; cols];
                for j in 0..cols {
                    let n = norms[j];
                    if n <= NORM_FLOOR {
                        continue;
                    }
                    // projection of the upstream gradient onto the unit direction
                    let proj: f64 = (0..rows).map(|i| g[i * cols + j] * dd[i * cols + j] / n).sum();
                    g_gain[j] = proj;
                    for i in 0..rows {
                        let unit = dd[i * cols + j] / n;
                        g_dir[i * cols + j] = gv[j] / n * (g[i * cols + j] - proj * unit);
                    }
                }
                if wants(*direction) {
                    accumulate(grads, *direction, &g_dir);
                }
                if wants(*gain) {
                    accumulate(grads, *gain, &g_gain);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let x = self.val(*logits).data();
                let k = targets.len() as f64;
                let ga: Vec<f64> = x
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / k)
                    .collect();
                accumulate(grads, *logits, &ga);
            }
            Op::SoftmaxXent { logits, target } => {
                let x = self.val(*logits).data();
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = x.iter().map(|v| (v - max).exp()).sum();
                let ga: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        let p = (v - max).exp() / total;
                        g[0] * (p - if i == *target { 1.0 } else { 0.0 })
                    })
                    .collect();
                accumulate(grads, *logits, &ga);
            }
            Op::Input | Op::Leaf | Op::Param(_) => {}
        }
        Ok(())
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::leaf`] (zeros when unreachable).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Gradient with respect to a parameter that took part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }
}

const NORM_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn transpose_data(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[j * n + i] = x[i * d + j];
        }
    }
    out
}

fn column_sums(x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, v) in x.iter().enumerate() {
        out[i % d] += v;
    }
    out
}

fn column_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += x[i * cols + j] * x[i * cols + j];
        }
    }
    out.iter().map(|v| v.sqrt()).collect()
}

/// Flat index groups normalized together by a softmax along `axis`.
fn lanes(shape: &[usize], axis: usize, op: &'static str) -> Result<Vec<Vec<usize>>, DiffError> {
    match (shape.len(), axis) {
        (0, 0) => Ok(vec![vec![0]]),
        (1, 0) => Ok(vec![(0..shape[0]).collect()]),
        (2, 1) => {
            let (n, d) = (shape[0], shape[1]);
            Ok((0..n).map(|i| (i * d..(i + 1) * d).collect()).collect())
        }
        (2, 0) => {
            let (n, d) = (shape[0], shape[1]);
            Ok((0..d).map(|j| (0..n).map(|i| i * d + j).collect()).collect())
        }
        (rank, axis) => Err(DiffError::Axis { op, axis, rank }),
    }
}
