//! Tape-based reverse-mode automatic differentiation.
//!
//! A forward pass records every operation onto a [`Tape`] in topological
//! order (inputs always precede outputs), so the backward sweep is a single
//! reverse scan that visits each node exactly once and accumulates adjoints.
//! Gradients flowing into the same node from multiple consumers add up.
//!
//! Trainable tensors live in a [`ParamStore`] outside any tape; a forward
//! pass registers them as leaves and remembers the binding so
//! [`Tape::backward_params`] can deposit gradients back into the store.
//!
//! A tape and its tensors are confined to one thread while a pass is in
//! flight; distinct tapes are independent and may run on different threads.

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, pearson_corr, Tensor, SIM_EPS};

/// Lower clamp applied to probabilities inside the cross-entropy loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a trainable tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters. Iteration order is insertion order,
/// which keeps checkpoints and optimizer state deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Global L2 norm over all gradients, used for clipping.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Element-wise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Elu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
        }
    }

    /// Derivative expressed in terms of input x and output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

/// Node handle on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    /// out = mul * x + add, element-wise with constant coefficients.
    Affine {
        x: usize,
        mul: f64,
    },
    /// out = s * x where s is a 1x1 node (trainable scalar).
    ScalarMul {
        s: usize,
        x: usize,
    },
    Transpose(usize),
    Activation {
        x: usize,
        kind: Activation,
    },
    SoftmaxRows(usize),
    /// Row softmax with one index forced to exactly zero.
    MaskedSoftmaxRow {
        x: usize,
        excluded: usize,
    },
    /// Square-matrix variant: row i excludes column i.
    MaskedSoftmaxDiag(usize),
    /// Rows scaled to unit L2 norm; (near-)zero rows map to zero rows.
    NormalizeRows(usize),
    /// Rows shifted to zero mean.
    CenterRows(usize),
    /// out[i][j] = col[i] + row[j].
    OuterSum {
        col: usize,
        row: usize,
    },
    HConcat(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    /// Add a 1xK row vector to every row of x.
    AddRow {
        x: usize,
        row: usize,
    },
    Sum(usize),
    Mean(usize),
    CosineSim(usize, usize),
    PearsonCorr(usize, usize),
    /// Mean negative log likelihood of per-row probabilities at `labels`.
    CrossEntropy {
        probs: usize,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
}

/// Recorded forward computation. See the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, ParamId)>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        a_rows: a.rows(),
        a_cols: a.cols(),
        b_rows: b.rows(),
        b_cols: b.cols(),
    }
}

/// Softmax over `scores` excluding one index, writing into `out`.
/// Stabilized by subtracting the max over the surviving entries.
fn masked_softmax_kernel(scores: &[f64], excluded: usize, out: &mut [f64]) {
    let max = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != excluded)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (k, &s) in scores.iter().enumerate() {
        if k == excluded {
            out[k] = 0.0;
        } else {
            let e = (s - max).exp();
            out[k] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

/// Shared softmax adjoint: dx_k = y_k * (g_k - sum_j g_j y_j).
/// Works for the masked variants too because the excluded entry has y = 0.
fn softmax_backward_row(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((d, &yk), &gk) in dx.iter_mut().zip(y).zip(g) {
        *d += yk * (gk - dot);
    }
}

/// Gradient of cosine_sim(a, b) w.r.t. a, scaled by upstream g.
/// `c` is the forward value. Degenerate inputs never reach here.
fn cosine_grad_wrt_first(a: &[f64], b: &[f64], c: f64, g: f64, out: &mut [f64]) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        *o += g * (bi / (na * nb) - c * ai / (na * na));
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, op: &'static str, node_op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            op: node_op,
            value,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", Op::Leaf, value)
    }

    /// Register a trainable parameter as a leaf, remembering the binding.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let v = self.push("param", Op::Leaf, store.get(id).value.clone())?;
        self.bindings.push((v.0, id));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let value = ta.matmul(tb);
        self.push("matmul", Op::Matmul(a.0, b.0), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(shape_err("add", ta, tb));
        }
        let value = ta.zip_map(tb, |x, y| x + y);
        self.push("add", Op::Add(a.0, b.0), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(shape_err("sub", ta, tb));
        }
        let value = ta.zip_map(tb, |x, y| x - y);
        self.push("sub", Op::Sub(a.0, b.0), value)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(shape_err("hadamard", ta, tb));
        }
        let value = ta.zip_map(tb, |x, y| x * y);
        self.push("hadamard", Op::Hadamard(a.0, b.0), value)
    }

    /// mul * x + add, element-wise with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let value = self.nodes[x.0].value.map(|v| mul * v + add);
        self.push("affine", Op::Affine { x: x.0, mul }, value)
    }

    /// Scale a tensor by a trainable 1x1 scalar node.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Result<Var> {
        let ts = &self.nodes[s.0].value;
        if ts.shape() != (1, 1) {
            return Err(Error::NotScalar {
                op: "scalar_mul",
                rows: ts.rows(),
                cols: ts.cols(),
            });
        }
        let c = ts.get(0, 0);
        let value = self.nodes[x.0].value.map(|v| c * v);
        self.push("scalar_mul", Op::ScalarMul { s: s.0, x: x.0 }, value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.transposed();
        self.push("transpose", Op::Transpose(x.0), value)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = self.nodes[x.0].value.map(|v| kind.apply(v));
        self.push("activation", Op::Activation { x: x.0, kind }, value)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Elu)
    }

    /// Plain row-wise softmax (no exclusion), max-stabilized.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = t.shape();
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &s) in row.iter().enumerate() {
                let e = (s - max).exp();
                value.set(i, j, e);
                sum += e;
            }
            for j in 0..c {
                value.set(i, j, value.get(i, j) / sum);
            }
        }
        self.push("softmax_rows", Op::SoftmaxRows(x.0), value)
    }

    /// Softmax over a 1xN row with `excluded` forced to exactly zero; the
    /// normalizer runs over the remaining entries only.
    pub fn masked_softmax_row(&mut self, x: Var, excluded: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = t.cols();
        if t.rows() != 1 {
            return Err(Error::Contract(format!(
                "masked_softmax_row expects a 1xN row, got {}x{}",
                t.rows(),
                n
            )));
        }
        if n < 2 {
            return Err(Error::DegenerateGraph { n });
        }
        if excluded >= n {
            return Err(Error::Contract(format!(
                "excluded index {excluded} out of range for row of length {n}"
            )));
        }
        let mut value = Tensor::zeros(1, n);
        masked_softmax_kernel(t.row(0), excluded, value.data_mut());
        self.push(
            "masked_softmax_row",
            Op::MaskedSoftmaxRow {
                x: x.0,
                excluded,
            },
            value,
        )
    }

    /// Row-wise masked softmax on a square score matrix, excluding the
    /// diagonal: row i is normalized over j != i and gets an exact zero at i.
    pub fn masked_softmax_diag(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let n = t.rows();
        if t.cols() != n {
            return Err(shape_err("masked_softmax_diag", t, t));
        }
        if n < 2 {
            return Err(Error::DegenerateGraph { n });
        }
        let mut value = Tensor::zeros(n, n);
        for i in 0..n {
            masked_softmax_kernel(t.row(i), i, &mut value.data_mut()[i * n..(i + 1) * n]);
        }
        self.push("masked_softmax_diag", Op::MaskedSoftmaxDiag(x.0), value)
    }

    /// Scale each row to unit L2 norm. Rows with norm <= SIM_EPS become zero
    /// rows (and receive zero gradient).
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = t.shape();
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > SIM_EPS {
                for j in 0..c {
                    value.set(i, j, row[j] / norm);
                }
            }
        }
        self.push("normalize_rows", Op::NormalizeRows(x.0), value)
    }

    /// Shift each row to zero mean.
    pub fn center_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (r, c) = t.shape();
        let mut value = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            for j in 0..c {
                value.set(i, j, row[j] - mean);
            }
        }
        self.push("center_rows", Op::CenterRows(x.0), value)
    }

    /// out[i][j] = col[i] + row[j], for col Nx1 and row 1xM.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let (tc, tr) = (&self.nodes[col.0].value, &self.nodes[row.0].value);
        if tc.cols() != 1 || tr.rows() != 1 {
            return Err(shape_err("outer_sum", tc, tr));
        }
        let (n, m) = (tc.rows(), tr.cols());
        let mut value = Tensor::zeros(n, m);
        for i in 0..n {
            let ci = tc.get(i, 0);
            for j in 0..m {
                value.set(i, j, ci + tr.get(0, j));
            }
        }
        self.push(
            "outer_sum",
            Op::OuterSum {
                col: col.0,
                row: row.0,
            },
            value,
        )
    }

    /// Horizontal concatenation of tensors sharing a row count.
    pub fn hconcat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("hconcat of an empty list".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(shape_err("hconcat", &self.nodes[parts[0].0].value, t));
            }
            total += t.cols();
        }
        let mut value = Tensor::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            for i in 0..rows {
                for j in 0..t.cols() {
                    value.set(i, offset + j, t.get(i, j));
                }
            }
            offset += t.cols();
        }
        self.push(
            "hconcat",
            Op::HConcat(parts.iter().map(|v| v.0).collect()),
            value,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if start + len > t.cols() || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range for {} columns",
                start + len,
                t.cols()
            )));
        }
        let mut value = Tensor::zeros(t.rows(), len);
        for i in 0..t.rows() {
            for j in 0..len {
                value.set(i, j, t.get(i, start + j));
            }
        }
        self.push(
            "slice_cols",
            Op::SliceCols {
                x: x.0,
                start,
                len,
            },
            value,
        )
    }

    /// Add a 1xK row vector to every row of an NxK tensor.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[row.0].value);
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut value = tx.clone();
        for i in 0..tx.rows() {
            for j in 0..tx.cols() {
                value.set(i, j, value.get(i, j) + tr.get(0, j));
            }
        }
        self.push("add_row", Op::AddRow { x: x.0, row: row.0 }, value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push("sum", Op::Sum(x.0), value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", Op::Mean(x.0), value)
    }

    fn vector_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let is_vec = |t: &Tensor| t.rows() == 1 || t.cols() == 1;
        if !is_vec(ta) || !is_vec(tb) || ta.len() != tb.len() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    /// Cosine similarity of two equal-length vectors as a 1x1 node.
    /// Zero-norm inputs produce 0 with zero gradient.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vector_pair("cosine_sim", a, b)?;
        let (c, _) = cosine_sim(self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        self.push("cosine_sim", Op::CosineSim(a.0, b.0), Tensor::scalar(c))
    }

    /// Pearson correlation of two equal-length vectors as a 1x1 node.
    /// Zero variance in either input produces 0 with zero gradient.
    pub fn pearson_corr(&mut self, a: Var, b: Var) -> Result<Var> {
        self.vector_pair("pearson_corr", a, b)?;
        let ta = &self.nodes[a.0].value;
        if ta.len() < 2 {
            return Err(Error::Contract(
                "pearson_corr needs vectors of length >= 2".into(),
            ));
        }
        let r = pearson_corr(ta.data(), self.nodes[b.0].value.data());
        self.push("pearson_corr", Op::PearsonCorr(a.0, b.0), Tensor::scalar(r))
    }

    /// Mean cross-entropy of per-row probabilities against integer labels,
    /// with probabilities clamped below at [`PROB_CLAMP`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[probs.0].value;
        if labels.is_empty() || labels.len() != t.rows() {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                t.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= t.cols()) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {bad} out of range for {} classes",
                t.cols()
            )));
        }
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            total -= t.get(i, label).max(PROB_CLAMP).ln();
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                probs: probs.0,
                labels: labels.to_vec(),
            },
            value,
        )
    }

    /// Reverse sweep from a scalar loss node. Fills node gradients; every
    /// node not on a path to the loss keeps `grad = None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.shape() != (1, 1) {
            return Err(Error::NotScalar {
                op: "backward",
                rows: lt.rows(),
                cols: lt.cols(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let (before, at) = self.nodes.split_at_mut(i);
            let node = &mut at[0];
            let Some(g) = node.grad.take() else {
                continue;
            };
            backprop_node(&node.op, &node.value, &g, before);
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Backward plus accumulation of leaf gradients into their parameters.
    pub fn backward_params(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for &(node, id) in &self.bindings {
            if let Some(g) = &self.nodes[node].grad {
                store.get_mut(id).grad.add_scaled(g, 1.0);
            }
        }
        Ok(())
    }
}

fn add_grad(nodes: &mut [Node], idx: usize, delta: Tensor) {
    match &mut nodes[idx].grad {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

fn add_grad_with(nodes: &mut [Node], idx: usize, shape: (usize, usize), f: impl FnOnce(&mut Tensor)) {
    let g = nodes[idx]
        .grad
        .get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    f(g);
}

/// Apply one node's adjoint rule. `before` holds all nodes with smaller
/// indices, i.e. every possible input of this node.
fn backprop_node(op: &Op, value: &Tensor, g: &Tensor, before: &mut [Node]) {
    match op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let da = g.matmul(&before[*b].value.transposed());
            add_grad(before, *a, da);
            let db = before[*a].value.transposed().matmul(g);
            add_grad(before, *b, db);
        }
        Op::Add(a, b) => {
            add_grad(before, *a, g.clone());
            add_grad(before, *b, g.clone());
        }
        Op::Sub(a, b) => {
            add_grad(before, *a, g.clone());
            add_grad(before, *b, g.map(|v| -v));
        }
        Op::Hadamard(a, b) => {
            let da = g.zip_map(&before[*b].value, |gv, bv| gv * bv);
            add_grad(before, *a, da);
            let db = g.zip_map(&before[*a].value, |gv, av| gv * av);
            add_grad(before, *b, db);
        }
        Op::Affine { x, mul } => {
            add_grad(before, *x, g.map(|v| mul * v));
        }
        Op::ScalarMul { s, x } => {
            let c = before[*s].value.get(0, 0);
            let ds = g
                .data()
                .iter()
                .zip(before[*x].value.data())
                .map(|(&gv, &xv)| gv * xv)
                .sum::<f64>();
            add_grad(before, *s, Tensor::scalar(ds));
            add_grad(before, *x, g.map(|v| c * v));
        }
        Op::Transpose(x) => {
            add_grad(before, *x, g.transposed());
        }
        Op::Activation { x, kind } => {
            let dx = g.zip_map(&before[*x].value, |gv, xv| {
                gv * kind.derivative(xv, kind.apply(xv))
            });
            add_grad(before, *x, dx);
        }
        Op::SoftmaxRows(x) => {
            let (r, c) = value.shape();
            add_grad_with(before, *x, (r, c), |dx| {
                for i in 0..r {
                    softmax_backward_row(
                        value.row(i),
                        g.row(i),
                        &mut dx.data_mut()[i * c..(i + 1) * c],
                    );
                }
            });
        }
        Op::MaskedSoftmaxRow { x, excluded } => {
            let n = value.cols();
            debug_assert_eq!(value.get(0, *excluded), 0.0);
            add_grad_with(before, *x, (1, n), |dx| {
                softmax_backward_row(value.row(0), g.row(0), dx.data_mut());
            });
        }
        Op::MaskedSoftmaxDiag(x) => {
            let n = value.rows();
            add_grad_with(before, *x, (n, n), |dx| {
                for i in 0..n {
                    softmax_backward_row(
                        value.row(i),
                        g.row(i),
                        &mut dx.data_mut()[i * n..(i + 1) * n],
                    );
                }
            });
        }
        Op::NormalizeRows(x) => {
            let (r, c) = value.shape();
            let norms: Vec<f64> = (0..r)
                .map(|i| {
                    before[*x]
                        .value
                        .row(i)
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            add_grad_with(before, *x, (r, c), |dx| {
                for i in 0..r {
                    if norms[i] <= SIM_EPS {
                        continue;
                    }
                    let y = value.row(i);
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    let out = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for ((o, &gk), &yk) in out.iter_mut().zip(gr).zip(y) {
                        *o += (gk - dot * yk) / norms[i];
                    }
                }
            });
        }
        Op::CenterRows(x) => {
            let (r, c) = value.shape();
            add_grad_with(before, *x, (r, c), |dx| {
                for i in 0..r {
                    let gr = g.row(i);
                    let mean = gr.iter().sum::<f64>() / c as f64;
                    let out = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (o, &gk) in out.iter_mut().zip(gr) {
                        *o += gk - mean;
                    }
                }
            });
        }
        Op::OuterSum { col, row } => {
            let (n, m) = value.shape();
            add_grad_with(before, *col, (n, 1), |dc| {
                for i in 0..n {
                    let s: f64 = g.row(i).iter().sum();
                    dc.set(i, 0, dc.get(i, 0) + s);
                }
            });
            add_grad_with(before, *row, (1, m), |dr| {
                for j in 0..m {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += g.get(i, j);
                    }
                    dr.set(0, j, dr.get(0, j) + s);
                }
            });
        }
        Op::HConcat(parts) => {
            let rows = value.rows();
            let mut offset = 0;
            for &p in parts {
                let w = before[p].value.cols();
                add_grad_with(before, p, (rows, w), |dp| {
                    for i in 0..rows {
                        for j in 0..w {
                            dp.set(i, j, dp.get(i, j) + g.get(i, offset + j));
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start, len } => {
            let shape = before[*x].value.shape();
            add_grad_with(before, *x, shape, |dx| {
                for i in 0..g.rows() {
                    for j in 0..*len {
                        dx.set(i, start + j, dx.get(i, start + j) + g.get(i, j));
                    }
                }
            });
        }
        Op::AddRow { x, row } => {
            add_grad(before, *x, g.clone());
            let cols = g.cols();
            add_grad_with(before, *row, (1, cols), |dr| {
                for j in 0..cols {
                    let mut s = 0.0;
                    for i in 0..g.rows() {
                        s += g.get(i, j);
                    }
                    dr.set(0, j, dr.get(0, j) + s);
                }
            });
        }
        Op::Sum(x) => {
            let gv = g.get(0, 0);
            let shape = before[*x].value.shape();
            add_grad(before, *x, Tensor::filled(shape.0, shape.1, gv));
        }
        Op::Mean(x) => {
            let shape = before[*x].value.shape();
            let gv = g.get(0, 0) / (shape.0 * shape.1) as f64;
            add_grad(before, *x, Tensor::filled(shape.0, shape.1, gv));
        }
        Op::CosineSim(a, b) => {
            let (av, bv) = (before[*a].value.data(), before[*b].value.data());
            let (c, degenerate) = cosine_sim(av, bv);
            if degenerate {
                return;
            }
            let gv = g.get(0, 0);
            let sa = before[*a].value.shape();
            let sb = before[*b].value.shape();
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            cosine_grad_wrt_first(av, bv, c, gv, &mut da);
            cosine_grad_wrt_first(bv, av, c, gv, &mut db);
            add_grad(
                before,
                *a,
                Tensor::from_vec(sa.0, sa.1, da).expect("shape preserved"),
            );
            add_grad(
                before,
                *b,
                Tensor::from_vec(sb.0, sb.1, db).expect("shape preserved"),
            );
        }
        Op::PearsonCorr(a, b) => {
            let center = |v: &[f64]| -> Vec<f64> {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|&x| x - mean).collect()
            };
            let ac = center(before[*a].value.data());
            let bc = center(before[*b].value.data());
            let (c, degenerate) = cosine_sim(&ac, &bc);
            if degenerate {
                return;
            }
            let gv = g.get(0, 0);
            let sa = before[*a].value.shape();
            let sb = before[*b].value.shape();
            let mut da = vec![0.0; ac.len()];
            let mut db = vec![0.0; bc.len()];
            cosine_grad_wrt_first(&ac, &bc, c, gv, &mut da);
            cosine_grad_wrt_first(&bc, &ac, c, gv, &mut db);
            // Chain through centering: subtract the mean of the adjoint.
            for d in [&mut da, &mut db] {
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                for v in d.iter_mut() {
                    *v -= mean;
                }
            }
            add_grad(
                before,
                *a,
                Tensor::from_vec(sa.0, sa.1, da).expect("shape preserved"),
            );
            add_grad(
                before,
                *b,
                Tensor::from_vec(sb.0, sb.1, db).expect("shape preserved"),
            );
        }
        Op::CrossEntropy { probs, labels } => {
            let gv = g.get(0, 0);
            let n = labels.len() as f64;
            let shape = before[*probs].value.shape();
            let picked: Vec<f64> = labels
                .iter()
                .enumerate()
                .map(|(i, &label)| before[*probs].value.get(i, label))
                .collect();
            add_grad_with(before, *probs, shape, |dp| {
                for ((i, &label), &p) in labels.iter().enumerate().zip(&picked) {
                    // Entries below the clamp sit on the flat part of
                    // max(p, PROB_CLAMP) and get zero gradient.
                    if p >= PROB_CLAMP {
                        dp.set(i, label, dp.get(i, label) - gv / (n * p));
                    }
                }
            });
        }
    }
}
