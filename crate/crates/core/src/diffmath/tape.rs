//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node to the [`Tape`]; a node's parents always
//! have smaller indices, so walking the tape backwards from the root is a
//! reverse topological order that visits each node once.
//!
//! Leaves come in two flavours: trainable leaves (created with
//! [`Tape::leaf`] or bound from a [`ParamStore`]) accumulate gradient across
//! calls to [`Tape::backward`]; constants never receive gradient. Intermediate
//! adjoints are rebuilt from scratch on every backward pass, so calling
//! `backward` twice leaves exactly twice the gradient on every leaf.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::matrix::{matmul_at_acc, matmul_bt_acc, Matrix};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Negative slope used by [`Tape::leaky_relu`] throughout the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row neighbour lists for [`Tape::attention`]; row `i` attends over the
/// rows listed in `adjacency[i]`.
pub type Adjacency = Rc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    PickCols(Var, Rc<Vec<usize>>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2Norm(Var),
    Sum(Var),
    Mean(Var),
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    adjacency: Adjacency,
    scale: f64,
    slope: f64,
    /// Pre-activation scores `scale · q_i·k_j`, aligned with `adjacency`.
    scores: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only populated for trainable leaves.
    grad: Option<Matrix>,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct ParamKey(u64);

/// Recording of one computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<(ParamKey, String, bool), Var>,
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let grad = match op {
            Op::Leaf => Some(Matrix::zeros(value.rows(), value.cols())),
            _ => None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Constant, false, "constant")
    }

    /// Binds a named parameter of `store`. Repeated bindings of the same
    /// parameter on one tape return the same node, so shared weights are a
    /// single leaf. With `trainable == false` the value enters as a constant.
    pub fn param(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Result<Var> {
        let key = (ParamKey(store.id()), name.to_string(), trainable);
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = if trainable {
            self.leaf(value)?
        } else {
            self.constant(value)?
        };
        self.params.insert(key, v);
        Ok(v)
    }

    /// Trainable parameter leaves bound from `store`, by name.
    pub(crate) fn bound_params(&self, store_id: u64) -> impl Iterator<Item = (&str, Var)> {
        self.params
            .iter()
            .filter(move |((k, _, trainable), _)| k.0 == store_id && *trainable)
            .map(|((_, name, _), v)| (name.as_str(), *v))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf; `None` for other nodes.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Attention weights recorded by an [`Tape::attention`] node, aligned
    /// with its adjacency lists.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention(c) => Some(&c.weights),
            _ => None,
        }
    }

    // ---- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        let out = x.matmul(y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op,
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds the `1 × c` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg, "add_row")
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg, "affine")
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(parts[0]).shape(),
                    rhs: v.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Row-major reinterpretation of `x` as `rows × cols`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                lhs: v.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Matrix::from_vec(rows, cols, v.data().to_vec());
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: v.shape(),
                rhs: (bad, 0),
            });
        }
        let rows: Vec<&[f64]> = index.iter().map(|&i| v.row(i)).collect();
        let mut out = Matrix::from_rows(&rows);
        if index.is_empty() {
            out = Matrix::zeros(0, v.cols());
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, index), rg, "gather_rows")
    }

    /// `out[r, 0] = x[r, cols[r]]`.
    pub fn pick_cols(&mut self, x: Var, cols: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        if cols.len() != v.rows() || cols.iter().any(|&c| c >= v.cols()) {
            return Err(Error::Shape {
                op: "pick_cols",
                lhs: v.shape(),
                rhs: (cols.len(), 1),
            });
        }
        let data = cols.iter().enumerate().map(|(r, &c)| v.get(r, c)).collect();
        let out = Matrix::from_vec(v.rows(), 1, data);
        let rg = self.rg(x);
        self.push(out, Op::PickCols(x, cols), rg, "pick_cols")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu_with(x, LEAKY_SLOPE)
    }

    pub fn leaky_relu_with(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| leaky(v, slope));
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg, "leaky_relu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg, "square")
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg, "log")
    }

    /// Numerically stable softmax applied to each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut out = v.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg, "softmax_rows")
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut out = v.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|z| *z -= lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmaxRows(x), rg, "log_softmax_rows")
    }

    /// Euclidean (Frobenius) norm of all entries, as `1 × 1`.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).squared_norm().sqrt();
        let rg = self.rg(x);
        self.push(Matrix::scalar(n), Op::L2Norm(x), rg, "l2_norm")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Matrix::scalar(s), Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                lhs: v.shape(),
                rhs: (1, 1),
            });
        }
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Matrix::scalar(m), Op::Mean(x), rg, "mean")
    }

    /// Sparse scaled dot-product attention with a LeakyReLU score.
    ///
    /// For each row `i`: `e_ij = leaky(scale · q_i·k_j)` over `j` in
    /// `adjacency[i]`, `α_i = softmax(e_i)`, `out_i = Σ_j α_ij v_j`. A row with
    /// an empty list produces zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        adjacency: Adjacency,
        scale: f64,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() {
            return Err(Error::Shape {
                op: "attention",
                lhs: qv.shape(),
                rhs: kv.shape(),
            });
        }
        if vv.rows() != kv.rows() || adjacency.len() != qv.rows() {
            return Err(Error::Shape {
                op: "attention",
                lhs: kv.shape(),
                rhs: vv.shape(),
            });
        }
        if adjacency.iter().flatten().any(|&j| j >= kv.rows()) {
            return Err(Error::Shape {
                op: "attention",
                lhs: (adjacency.len(), kv.rows()),
                rhs: kv.shape(),
            });
        }
        let slope = LEAKY_SLOPE;
        let mut out = Matrix::zeros(qv.rows(), vv.cols());
        let mut scores = Vec::with_capacity(qv.rows());
        let mut weights = Vec::with_capacity(qv.rows());
        for (i, nbrs) in adjacency.iter().enumerate() {
            let qi = qv.row(i);
            let s: Vec<f64> = nbrs.iter().map(|&j| scale * dot(qi, kv.row(j))).collect();
            let mut w: Vec<f64> = s.iter().map(|&x| leaky(x, slope)).collect();
            softmax_in_place(&mut w);
            let orow = out.row_mut(i);
            for (&j, &a) in nbrs.iter().zip(&w) {
                for (o, x) in orow.iter_mut().zip(vv.row(j)) {
                    *o += a * x;
                }
            }
            scores.push(s);
            weights.push(w);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache {
            q,
            k,
            v,
            adjacency,
            scale,
            slope,
            scores,
            weights,
        };
        self.push(out, Op::Attention(Box::new(cache)), rg, "attention")
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates `∂root/∂leaf` into every trainable leaf reachable from
    /// `root`. `root` must be `1 × 1`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NonScalarRoot {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let bv = self.value(b);
                        let slot = slot(&mut adj, a, self.value(a).shape());
                        matmul_bt_acc(&g, bv, slot);
                    }
                    if self.rg(b) {
                        let av = self.value(a);
                        let slot = slot(&mut adj, b, self.value(b).shape());
                        matmul_at_acc(av, &g, slot);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc_if(&mut adj, a, &g);
                    self.acc_if(&mut adj, b, &g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.acc_if(&mut adj, a, &g);
                    if self.rg(b) {
                        self.acc_if(&mut adj, b, &g.map(|v| -v));
                    }
                }
                Op::AddRow(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    self.acc_if(&mut adj, x, &g);
                    if self.rg(bias) {
                        let mut colsum = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (c, v) in colsum.data_mut().iter_mut().zip(g.row(r)) {
                                *c += v;
                            }
                        }
                        self.acc_if(&mut adj, bias, &colsum);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.rg(a) {
                        let d = hadamard(&g, self.value(b));
                        self.acc_if(&mut adj, a, &d);
                    }
                    if self.rg(b) {
                        let d = hadamard(&g, self.value(a));
                        self.acc_if(&mut adj, b, &d);
                    }
                }
                Op::Affine(x, scale) => {
                    let (x, scale) = (*x, *scale);
                    self.acc_if(&mut adj, x, &g.map(|v| v * scale));
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let shape = self.value(p).shape();
                        if self.rg(p) {
                            let s = slot(&mut adj, p, shape);
                            for r in 0..shape.0 {
                                for (d, v) in s.row_mut(r).iter_mut().zip(&g.row(r)[off..off + shape.1]) {
                                    *d += v;
                                }
                            }
                        }
                        off += shape.1;
                    }
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let shape = self.value(x).shape();
                    let d = Matrix::from_vec(shape.0, shape.1, g.data().to_vec());
                    self.acc_if(&mut adj, x, &d);
                }
                Op::GatherRows(x, index) => {
                    let (x, index) = (*x, index.clone());
                    if self.rg(x) {
                        let shape = self.value(x).shape();
                        let s = slot(&mut adj, x, shape);
                        for (r, &src) in index.iter().enumerate() {
                            for (d, v) in s.row_mut(src).iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::PickCols(x, cols) => {
                    let (x, cols) = (*x, cols.clone());
                    if self.rg(x) {
                        let shape = self.value(x).shape();
                        let s = slot(&mut adj, x, shape);
                        for (r, &c) in cols.iter().enumerate() {
                            let cur = s.get(r, c);
                            s.set(r, c, cur + g.get(r, 0));
                        }
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let d = zip3(&g, &node.value, |gv, y| gv * (1.0 - y * y));
                    self.acc_if(&mut adj, x, &d);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let d = zip3(&g, &node.value, |gv, y| gv * y * (1.0 - y));
                    self.acc_if(&mut adj, x, &d);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let d = zip3(&g, self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    self.acc_if(&mut adj, x, &d);
                }
                Op::LeakyRelu(x, slope) => {
                    let (x, slope) = (*x, *slope);
                    let d = zip3(&g, self.value(x), |gv, xv| if xv > 0.0 { gv } else { slope * gv });
                    self.acc_if(&mut adj, x, &d);
                }
                Op::Square(x) => {
                    let x = *x;
                    let d = zip3(&g, self.value(x), |gv, xv| 2.0 * xv * gv);
                    self.acc_if(&mut adj, x, &d);
                }
                Op::Log(x) => {
                    let x = *x;
                    let d = zip3(&g, self.value(x), |gv, xv| gv / xv);
                    self.acc_if(&mut adj, x, &d);
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s = dot(yr, gr);
                        for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - s);
                        }
                    }
                    self.acc_if(&mut adj, x, &d);
                }
                Op::LogSoftmaxRows(x) => {
                    let x = *x;
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let s: f64 = gr.iter().sum();
                        for ((o, yv), gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * s;
                        }
                    }
                    self.acc_if(&mut adj, x, &d);
                }
                Op::L2Norm(x) => {
                    let x = *x;
                    let n = node.value.item();
                    if n > 0.0 {
                        let k = g.item() / n;
                        let d = self.value(x).map(|v| v * k);
                        self.acc_if(&mut adj, x, &d);
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    let (r, c) = self.value(x).shape();
                    self.acc_if(&mut adj, x, &Matrix::filled(r, c, g.item()));
                }
                Op::Mean(x) => {
                    let x = *x;
                    let (r, c) = self.value(x).shape();
                    let k = g.item() / (r * c) as f64;
                    self.acc_if(&mut adj, x, &Matrix::filled(r, c, k));
                }
                Op::Attention(cache) => {
                    let (dq, dk, dv) = self.attention_backward(cache, &g);
                    let (q, k, v) = (cache.q, cache.k, cache.v);
                    self.acc_if(&mut adj, q, &dq);
                    self.acc_if(&mut adj, k, &dk);
                    self.acc_if(&mut adj, v, &dv);
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx]
                    .grad
                    .as_mut()
                    .expect("leaf gradient buffer")
                    .add_assign(&g);
            }
        }
        Ok(())
    }

    fn acc_if(&self, adj: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if self.rg(v) {
            slot(adj, v, g.shape()).add_assign(g);
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &Matrix) -> (Matrix, Matrix, Matrix) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let mut dq = Matrix::zeros(qv.rows(), qv.cols());
        let mut dk = Matrix::zeros(kv.rows(), kv.cols());
        let mut dv = Matrix::zeros(vv.rows(), vv.cols());
        for (i, nbrs) in c.adjacency.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let gi = g.row(i);
            let w = &c.weights[i];
            let dalpha: Vec<f64> = nbrs.iter().map(|&j| dot(gi, vv.row(j))).collect();
            for (&j, &a) in nbrs.iter().zip(w) {
                for (d, x) in dv.row_mut(j).iter_mut().zip(gi) {
                    *d += a * x;
                }
            }
            let s = dot(w, &dalpha);
            for (n, &j) in nbrs.iter().enumerate() {
                let de = w[n] * (dalpha[n] - s);
                let ds = de * if c.scores[i][n] > 0.0 { 1.0 } else { c.slope } * c.scale;
                if ds == 0.0 {
                    continue;
                }
                let (krow, qrow) = (kv.row(j), qv.row(i));
                for (d, x) in dq.row_mut(i).iter_mut().zip(krow) {
                    *d += ds * x;
                }
                for (d, x) in dk.row_mut(j).iter_mut().zip(qrow) {
                    *d += ds * x;
                }
            }
        }
        (dq, dk, dv)
    }
}

fn slot(adj: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip3(a, b, |x, y| x * y)
}

fn zip3(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Max-subtracted softmax over a slice. An empty slice is left untouched.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(1, 5)).unwrap();
        let y = t.tanh(x).unwrap();
        assert_eq!(t.value(y), &Matrix::zeros(1, 5));
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&[2.5, 2.5, 2.5])).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for &v in t.value(y).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(2, 3, vec![1., -2., 3., 4., 0.5, 6.])).unwrap();
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Matrix::filled(2, 3, 1.0));
    }

    #[test]
    fn l2_norm_gradient_at_three_four() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[3.0, 4.0])).unwrap();
        let n = t.l2_norm(x).unwrap();
        assert_eq!(t.value(n).item(), 5.0);
        t.backward(n).unwrap();
        let g = t.grad(x).unwrap();
        assert!(close(g.get(0, 0), 0.6, 1e-15));
        assert!(close(g.get(0, 1), 0.8, 1e-15));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot { rows: 2, cols: 2 })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3)).unwrap();
        let b = t.leaf(Matrix::zeros(2, 3)).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn nan_input_fails_fast() {
        let mut t = Tape::new();
        assert!(matches!(
            t.leaf(Matrix::row_vector(&[1.0, f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let z = t.constant(Matrix::row_vector(&[0.0])).unwrap();
        assert!(matches!(t.log(z), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::row_vector(&[0.3, -1.7, 2.2])).unwrap();
        let w = t.leaf(Matrix::from_vec(3, 1, vec![0.1, 0.2, -0.4])).unwrap();
        let y = t.matmul(x, w).unwrap();
        let y = t.tanh(y).unwrap();
        let y = t.square(y).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let once = t.grad(x).unwrap().clone();
        t.backward(s).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        t.zero_grads();
        assert_eq!(t.grad(x).unwrap(), &Matrix::zeros(1, 3));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let x = t.leaf(Matrix::row_vector(&[3.0, 4.0])).unwrap();
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn empty_attention_row_is_zero() {
        let mut t = Tape::new();
        let q = t.leaf(Matrix::from_vec(2, 2, vec![1., 2., 3., 4.])).unwrap();
        let adj: Adjacency = Rc::new(vec![vec![], vec![0, 1]]);
        let out = t.attention(q, q, q, adj, 1.0).unwrap();
        assert_eq!(t.value(out).row(0), &[0.0, 0.0]);
        let w = t.attention_weights(out).unwrap();
        assert!(w[0].is_empty());
        assert!(close(w[1].iter().sum::<f64>(), 1.0, 1e-12));
    }
}
