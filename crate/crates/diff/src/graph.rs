//! Recorded computation graph with differentiable backward passes.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. Calling
//! [`Graph::grad`] with `create_graph = true` expresses the vector-Jacobian
//! products themselves as graph nodes, so the resulting gradients can be
//! differentiated again (Hessian-vector products, losses that contain
//! gradients). With `create_graph = false` the backward nodes are recorded as
//! constants and nothing further is tracked.

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Fill(usize),
    SumRows(usize),
    ExpandRows(usize),
    SumCols(usize),
    ExpandCols(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Abs(usize),
    Powf(usize, f64),
    Step(usize),
    Sign(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Gather(usize, Rc<[usize]>),
    Scatter(usize, Rc<[usize]>),
    SliceRows(usize, usize),
    PadRows(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Fill(..) => "fill",
            Op::SumRows(..) => "sum_rows",
            Op::ExpandRows(..) => "expand_rows",
            Op::SumCols(..) => "sum_cols",
            Op::ExpandCols(..) => "expand_cols",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Powf(..) => "powf",
            Op::Step(..) => "step",
            Op::Sign(..) => "sign",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
            Op::SliceRows(..) => "slice_rows",
            Op::PadRows(..) => "pad_rows",
        }
    }

    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => [Some(a), Some(b)],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Fill(a)
            | Op::SumRows(a)
            | Op::ExpandRows(a)
            | Op::SumCols(a)
            | Op::ExpandCols(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Powf(a, _)
            | Op::Step(a)
            | Op::Sign(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Gather(a, _)
            | Op::Scatter(a, _)
            | Op::SliceRows(a, _)
            | Op::PadRows(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    no_grad: Cell<bool>,
    first_non_finite: Cell<Option<&'static str>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        if self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op, value: Tensor) -> Var<'_> {
        let requires_grad = !self.no_grad.get() && {
            let nodes = self.nodes.borrow();
            op.parents()
                .iter()
                .flatten()
                .any(|&p| nodes[p].requires_grad)
        };
        self.push(op, value, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Name of the first primitive that produced a non-finite value, if any.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.first_non_finite.get()
    }

    /// Fails if any node recorded so far holds a non-finite value.
    pub fn check_finite(&self) -> Result<(), crate::DiffError> {
        match self.first_non_finite.get() {
            Some(op) => Err(crate::DiffError::NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Gradients of the scalar `y` with respect to each of `xs`.
    ///
    /// Inputs that `y` does not depend on receive zero tensors. With
    /// `create_graph` the returned vars remain differentiable.
    pub fn grad<'g>(&'g self, y: Var<'g>, xs: &[Var<'g>], create_graph: bool) -> Vec<Var<'g>> {
        assert!(std::ptr::eq(y.graph, self), "var belongs to another graph");
        assert_eq!(y.value().len(), 1, "grad() needs a scalar output");
        let n = y.id + 1;

        // Nodes on some path from an input to the output.
        let (ops, requires): (Vec<Op>, Vec<bool>) = {
            let nodes = self.nodes.borrow();
            nodes[..n]
                .iter()
                .map(|node| (node.op.clone(), node.requires_grad))
                .unzip()
        };
        let mut from_input = vec![false; n];
        for x in xs {
            if x.id < n {
                from_input[x.id] = true;
            }
        }
        for id in 0..n {
            if !from_input[id] && requires[id] {
                from_input[id] = ops[id].parents().iter().flatten().any(|&p| from_input[p]);
            }
        }
        if !from_input[y.id] {
            return xs.iter().map(|x| self.zeros_like(*x)).collect();
        }

        let saved = self.no_grad.replace(!create_graph);
        let mut adjoint: Vec<Option<Var<'g>>> = vec![None; n];
        adjoint[y.id] = Some(self.constant(Tensor::full(y.shape().as_slice(), 1.0)));
        for id in (0..n).rev() {
            let Some(dy) = adjoint[id] else { continue };
            if !from_input[id] || matches!(ops[id], Op::Leaf) {
                continue;
            }
            let out = Var { graph: self, id };
            for (parent, contribution) in self.vjp(&ops[id], out, dy, &from_input) {
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => acc + contribution,
                    None => contribution,
                });
            }
        }
        self.no_grad.set(saved);

        xs.iter()
            .map(|x| match adjoint.get(x.id).copied().flatten() {
                Some(g) => g,
                None => self.zeros_like(*x),
            })
            .collect()
    }

    fn zeros_like<'g>(&'g self, x: Var<'g>) -> Var<'g> {
        self.constant(Tensor::zeros(&x.shape()))
    }

    /// Vector-Jacobian products of one node, expressed as graph operations.
    ///
    /// Only parents flagged in `needed` receive a contribution.
    fn vjp<'g>(
        &'g self,
        op: &Op,
        out: Var<'g>,
        dy: Var<'g>,
        needed: &[bool],
    ) -> Vec<(usize, Var<'g>)> {
        let v = |id: usize| Var { graph: self, id };
        let mut pairs = match *op {
            Op::Leaf | Op::Step(_) | Op::Sign(_) => vec![],
            Op::Add(a, b) => vec![(a, dy), (b, dy)],
            Op::Sub(a, b) => {
                let mut out = vec![(a, dy)];
                if needed[b] {
                    out.push((b, -dy));
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needed[a] {
                    out.push((a, dy * v(b)));
                }
                if needed[b] {
                    out.push((b, dy * v(a)));
                }
                out
            }
            Op::Scale(a, c) => vec![(a, dy.scale(c))],
            Op::AddScalar(a) => vec![(a, dy)],
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needed[a] {
                    out.push((a, dy.matmul(v(b).t())));
                }
                if needed[b] {
                    out.push((b, v(a).t().matmul(dy)));
                }
                out
            }
            Op::Transpose(a) => vec![(a, dy.t())],
            Op::Reshape(a) => vec![(a, dy.reshape(&v(a).shape()))],
            Op::Sum(a) => vec![(a, dy.fill(&v(a).shape()))],
            Op::Fill(a) => vec![(a, dy.sum())],
            Op::SumRows(a) => {
                let rows = v(a).shape()[0];
                vec![(a, dy.expand_rows(rows))]
            }
            Op::ExpandRows(a) => vec![(a, dy.sum_rows())],
            Op::SumCols(a) => {
                let cols = v(a).shape()[1];
                vec![(a, dy.expand_cols(cols))]
            }
            Op::ExpandCols(a) => vec![(a, dy.sum_cols())],
            Op::Exp(a) => vec![(a, dy * out)],
            Op::Log(a) => vec![(a, dy * v(a).powf(-1.0))],
            Op::Tanh(a) => vec![(a, dy * (out * out).scale(-1.0).add_scalar(1.0))],
            Op::Relu(a) => vec![(a, dy * v(a).step())],
            Op::Softplus(a) => vec![(a, dy * v(a).sigmoid())],
            Op::Sigmoid(a) => vec![(a, dy * out * out.scale(-1.0).add_scalar(1.0))],
            Op::Abs(a) => vec![(a, dy * v(a).sign())],
            Op::Powf(a, p) => {
                if p == 0.0 {
                    vec![]
                } else {
                    vec![(a, (dy * v(a).powf(p - 1.0)).scale(p))]
                }
            }
            Op::SoftmaxRows(a) => {
                let cols = out.shape()[1];
                let inner = (dy * out).sum_cols().expand_cols(cols);
                vec![(a, out * (dy - inner))]
            }
            Op::LogSoftmaxRows(a) => {
                let cols = out.shape()[1];
                let probs = out.exp();
                vec![(a, dy - probs * dy.sum_cols().expand_cols(cols))]
            }
            Op::Gather(table, ref idx) => {
                let rows = v(table).shape()[0];
                vec![(table, dy.scatter_rows(Rc::clone(idx), rows))]
            }
            Op::Scatter(a, ref idx) => vec![(a, dy.gather_rows(Rc::clone(idx)))],
            Op::SliceRows(a, start) => {
                let total = v(a).shape()[0];
                vec![(a, dy.pad_rows(start, total))]
            }
            Op::PadRows(a, start) => {
                let rows = v(a).shape()[0];
                vec![(a, dy.slice_rows(start, start + rows))]
            }
        };
        pairs.retain(|&(parent, _)| needed[parent]);
        pairs
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let value = f(&self.value());
        self.graph.record(op, value)
    }

    fn binary(self, other: Var<'g>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'g> {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
        let value = f(&self.value(), &other.value());
        self.graph.record(op, value)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| x * c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |t| t.map(|x| x + c))
    }

    pub fn matmul(self, other: Var<'g>) -> Var<'g> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn t(self) -> Var<'g> {
        self.unary(Op::Transpose(self.id), |t| t.transpose())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        self.unary(Op::Reshape(self.id), |t| t.reshaped(shape))
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    /// Broadcasts a one-element var to `shape`.
    pub fn fill(self, shape: &[usize]) -> Var<'g> {
        self.unary(Op::Fill(self.id), |t| Tensor::full(shape, t.item()))
    }

    /// Column-wise totals of a matrix: `[rows, cols] -> [cols]`.
    pub fn sum_rows(self) -> Var<'g> {
        self.unary(Op::SumRows(self.id), |t| {
            let (n, m) = t.dims2();
            let mut out = vec![0.0; m];
            for i in 0..n {
                for (o, &x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            Tensor::vector(out)
        })
    }

    /// Repeats a vector as every row: `[cols] -> [rows, cols]`.
    pub fn expand_rows(self, rows: usize) -> Var<'g> {
        self.unary(Op::ExpandRows(self.id), |t| {
            assert_eq!(t.shape().len(), 1, "expand_rows needs a vector");
            let mut out = Vec::with_capacity(rows * t.len());
            for _ in 0..rows {
                out.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, t.len(), out)
        })
    }

    /// Row totals of a matrix: `[rows, cols] -> [rows]`.
    pub fn sum_cols(self) -> Var<'g> {
        self.unary(Op::SumCols(self.id), |t| {
            let (n, _) = t.dims2();
            Tensor::vector((0..n).map(|i| t.row(i).iter().sum()).collect())
        })
    }

    /// Repeats each entry across a row: `[rows] -> [rows, cols]`.
    pub fn expand_cols(self, cols: usize) -> Var<'g> {
        self.unary(Op::ExpandCols(self.id), |t| {
            assert_eq!(t.shape().len(), 1, "expand_cols needs a vector");
            let out = t
                .data()
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, cols))
                .collect();
            Tensor::matrix(t.len(), cols, out)
        })
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp(self.id), |t| t.map(f64::exp))
    }

    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log(self.id), |t| t.map(f64::ln))
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |t| t.map(|x| x.max(0.0)))
    }

    pub fn softplus(self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), |t| t.map(stable_softplus))
    }

    pub fn sigmoid(self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), |t| t.map(stable_sigmoid))
    }

    pub fn abs(self) -> Var<'g> {
        self.unary(Op::Abs(self.id), |t| t.map(f64::abs))
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(self, p: f64) -> Var<'g> {
        self.unary(Op::Powf(self.id, p), |t| t.map(|x| x.powf(p)))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    /// Heaviside step (1 for positive inputs). Has zero derivative.
    pub fn step(self) -> Var<'g> {
        self.unary(Op::Step(self.id), |t| {
            t.map(|x| if x > 0.0 { 1.0 } else { 0.0 })
        })
    }

    /// Sign with `sign(0) = 0`. Has zero derivative.
    pub fn sign(self) -> Var<'g> {
        self.unary(Op::Sign(self.id), |t| {
            t.map(|x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        })
    }

    /// Softmax of every row of a matrix.
    pub fn softmax_rows(self) -> Var<'g> {
        self.unary(Op::SoftmaxRows(self.id), |t| {
            let (n, m) = t.dims2();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let row = t.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = out.len();
                out.extend(row.iter().map(|&x| (x - max).exp()));
                let total: f64 = out[start..].iter().sum();
                out[start..].iter_mut().for_each(|x| *x /= total);
            }
            Tensor::matrix(n, m, out)
        })
    }

    /// Log-softmax of every row of a matrix.
    pub fn log_softmax_rows(self) -> Var<'g> {
        self.unary(Op::LogSoftmaxRows(self.id), |t| {
            let (n, m) = t.dims2();
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let row = t.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|&x| x - lse));
            }
            Tensor::matrix(n, m, out)
        })
    }

    /// Selects rows of a matrix: `out[k] = self[idx[k]]`.
    pub fn gather_rows(self, idx: impl Into<Rc<[usize]>>) -> Var<'g> {
        let idx: Rc<[usize]> = idx.into();
        let op = Op::Gather(self.id, Rc::clone(&idx));
        self.unary(op, |t| {
            let (n, m) = t.dims2();
            let mut out = Vec::with_capacity(idx.len() * m);
            for &i in idx.iter() {
                assert!(i < n, "gather index {i} out of range {n}");
                out.extend_from_slice(t.row(i));
            }
            Tensor::matrix(idx.len(), m, out)
        })
    }

    /// Adjoint of [`Var::gather_rows`]: adds row `k` into row `idx[k]` of a
    /// zero matrix with `rows` rows.
    pub fn scatter_rows(self, idx: impl Into<Rc<[usize]>>, rows: usize) -> Var<'g> {
        let idx: Rc<[usize]> = idx.into();
        let op = Op::Scatter(self.id, Rc::clone(&idx));
        self.unary(op, |t| {
            let (n, m) = t.dims2();
            assert_eq!(n, idx.len());
            let mut out = vec![0.0; rows * m];
            for (k, &i) in idx.iter().enumerate() {
                for (o, &x) in out[i * m..(i + 1) * m].iter_mut().zip(t.row(k)) {
                    *o += x;
                }
            }
            Tensor::matrix(rows, m, out)
        })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'g> {
        self.unary(Op::SliceRows(self.id, start), |t| {
            let (n, m) = t.dims2();
            assert!(start <= end && end <= n, "slice {start}..{end} of {n} rows");
            Tensor::matrix(end - start, m, t.data()[start * m..end * m].to_vec())
        })
    }

    /// Embeds a matrix at row offset `start` of a zero matrix with `total` rows.
    pub fn pad_rows(self, start: usize, total: usize) -> Var<'g> {
        self.unary(Op::PadRows(self.id, start), |t| {
            let (n, m) = t.dims2();
            assert!(start + n <= total, "pad {n} rows at {start} into {total}");
            let mut out = vec![0.0; total * m];
            out[start * m..(start + n) * m].copy_from_slice(t.data());
            Tensor::matrix(total, m, out)
        })
    }

    /// Stacks the rows of `self` above the rows of `other`.
    pub fn concat_rows(self, other: Var<'g>) -> Var<'g> {
        let a = self.shape()[0];
        let b = other.shape()[0];
        self.pad_rows(0, a + b) + other.pad_rows(a, a + b)
    }

    /// Adds a vector to every row of a matrix.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        let n = self.shape()[0];
        self + row.expand_rows(n)
    }

    /// Multiplies every row of a matrix elementwise by a vector.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        let n = self.shape()[0];
        self * row.expand_rows(n)
    }

    /// Multiplies by a one-element var.
    pub fn mul_scalar(self, s: Var<'g>) -> Var<'g> {
        let shape = self.shape();
        self * s.fill(&shape)
    }

    pub fn dot(self, other: Var<'g>) -> Var<'g> {
        (self * other).sum()
    }

    /// Inverted dropout: zeroes each entry with probability `p` and rescales
    /// the survivors by `1 / (1 - p)`. The mask is a constant of the graph.
    pub fn dropout<R: rand::Rng + ?Sized>(self, p: f64, rng: &mut R) -> Var<'g> {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
        if p == 0.0 {
            return self;
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self * self.graph.constant(Tensor::new(shape, mask))
    }

    /// Euclidean norm over all entries.
    pub fn norm(self) -> Var<'g> {
        self.square().sum().powf(0.5)
    }
}

impl<'g> ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a.zip(b, |x, y| x + y))
    }
}

impl<'g> ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a.zip(b, |x, y| x - y))
    }
}

impl<'g> ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a.zip(b, |x, y| x * y))
    }
}

impl<'g> ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}
