//! Wengert-list tape. Each primitive appends a node holding its forward
//! value; `backward` walks the list in reverse applying the adjoint rules.

use std::ops::Range;

use super::array::{gemm, Array2};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, Range<usize>),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Transpose(Var),
    RowSum(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array2,
    needs_grad: bool,
}

#[cfg(test)]
thread_local! {
    /// Negative-control switch for the gradient checker tests.
    pub(crate) static CORRUPT_TANH_ADJOINT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Operation recorder. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Array2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2> {
        self.adjoints.get(v.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` is unreachable.
    pub fn wrt_or_zeros(&self, v: Var, like: &Array2) -> Array2 {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(like.rows(), like.cols()))
    }
}

fn broadcastable(op: &'static str, a: &Array2, b: &Array2) -> Result<bool, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(false)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(true)
    } else {
        Err(AutodiffError::shape(op, a.shape(), b.shape()))
    }
}

fn binary_broadcast(a: &Array2, b: &Array2, f: impl Fn(f64, f64) -> f64) -> Array2 {
    let mut out = a.clone();
    let cols = a.cols();
    if b.rows() == a.rows() {
        for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
            *o = f(*o, y);
        }
    } else {
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, &y) in row.iter_mut().zip(b.data()) {
                *o = f(*o, y);
            }
        }
    }
    out
}

fn column_sums(a: &Array2) -> Array2 {
    let mut out = Array2::zeros(1, a.cols());
    for r in 0..a.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(a.row(r)) {
            *o += v;
        }
    }
    out
}

fn softmax_rows(a: &Array2) -> Array2 {
    let mut out = a.clone();
    let cols = a.cols();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn log_softmax_rows(a: &Array2) -> Array2 {
    let mut out = a.clone();
    let cols = a.cols();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
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

    pub fn value(&self, v: Var) -> &Array2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array2, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(op, value, needs)
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Array2) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Array2) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        broadcastable("add", self.value(a), self.value(b))?;
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    /// Elementwise difference; `b` may be a broadcast row.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        broadcastable("sub", self.value(a), self.value(b))?;
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs))
    }

    /// Elementwise (Hadamard) product; `b` may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        broadcastable("mul", self.value(a), self.value(b))?;
        let value = binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |v| v + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        let needs = self.needs(a);
        self.push(Op::LogSoftmaxRows(a), value, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(AutodiffError::shape("concat_cols", va.shape(), vb.shape()));
        }
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Array2::from_vec(va.rows(), cols, data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatCols(a, b), value, needs))
    }

    pub fn slice_cols(&mut self, a: Var, range: Range<usize>) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if range.start > range.end || range.end > va.cols() {
            return Err(AutodiffError::shape("slice_cols", va.shape(), (range.start, range.end)));
        }
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(va.rows() * width);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[range.clone()]);
        }
        let value = Array2::from_vec(va.rows(), width, data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols(a, range), value, needs))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(Op::Sum(a), value, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Array2::scalar(va.sum() / va.len() as f64);
        let needs = self.needs(a);
        self.push(Op::Mean(a), value, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), value, needs)
    }

    /// Per-row sums as an `rows × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let value = Array2::from_vec(va.rows(), 1, data).expect("row count");
        let needs = self.needs(a);
        self.push(Op::RowSum(a), value, needs)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(AutodiffError::shape("reshape", va.shape(), (rows, cols)));
        }
        let value = Array2::from_vec(rows, cols, va.data().to_vec())?;
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), value, needs))
    }

    /// Row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, AutodiffError> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: bad, len: va.rows() });
        }
        let mut data = Vec::with_capacity(indices.len() * va.cols());
        for &i in &indices {
            data.extend_from_slice(va.row(i));
        }
        let value = Array2::from_vec(indices.len(), va.cols(), data)?;
        let needs = self.needs(a);
        Ok(self.push(Op::GatherRows(a, indices), value, needs))
    }

    /// Reverse sweep from a scalar root with unit seed.
    pub fn backward(&self, root: Var) -> Result<Gradients, AutodiffError> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot { shape });
        }
        self.backward_seeded(root, Array2::scalar(1.0))
    }

    /// Reverse sweep with an arbitrary seed adjoint for `root`.
    pub fn backward_seeded(&self, root: Var, seed: Array2) -> Result<Gradients, AutodiffError> {
        let shape = self.value(root).shape();
        if seed.shape() != shape {
            return Err(AutodiffError::shape("backward", shape, seed.shape()));
        }
        let mut adj: Vec<Option<Array2>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &Array2, adj: &mut [Option<Array2>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut d = Array2::zeros(va.rows(), va.cols());
                    gemm(g, false, vb, true, &mut d, 0.0);
                    accumulate(adj, *a, d);
                }
                if self.needs(*b) {
                    let mut d = Array2::zeros(vb.rows(), vb.cols());
                    gemm(va, true, g, false, &mut d, 0.0);
                    accumulate(adj, *b, d);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    let d = if self.value(*b).shape() == g.shape() { g.clone() } else { column_sums(g) };
                    accumulate(adj, *b, if sign < 0.0 { d.map(|v| -v) } else { d });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    accumulate(adj, *a, binary_broadcast(g, vb, |x, y| x * y));
                }
                if self.needs(*b) {
                    let full = g.zip_map(va, |x, y| x * y);
                    let d = if vb.shape() == g.shape() { full } else { column_sums(&full) };
                    accumulate(adj, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(adj, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::Tanh(a) => {
                #[allow(unused_mut)]
                let mut d = g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv));
                #[cfg(test)]
                if CORRUPT_TANH_ADJOINT.with(|c| c.get()) {
                    d = g.zip_map(y, |gv, yv| gv * (1.0 - yv));
                }
                accumulate(adj, *a, d);
            }
            Op::Sigmoid(a) => accumulate(adj, *a, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(adj, *a, d);
            }
            Op::Exp(a) => accumulate(adj, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(a) => accumulate(adj, *a, g.zip_map(self.value(*a), |gv, xv| gv / xv)),
            Op::Square(a) => accumulate(adj, *a, g.zip_map(self.value(*a), |gv, xv| 2.0 * gv * xv)),
            Op::SoftmaxRows(a) => {
                let mut d = g.zip_map(y, |gv, yv| gv * yv);
                for r in 0..d.rows() {
                    let dot: f64 = d.row(r).iter().sum();
                    for (dv, yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dv -= yv * dot;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (dv, yv) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dv -= yv.exp() * total;
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let left = self.value(*a).cols();
                let right = self.value(*b).cols();
                if self.needs(*a) {
                    accumulate(adj, *a, slice_cols_of(g, 0..left));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, slice_cols_of(g, left..left + right));
                }
            }
            Op::SliceCols(a, range) => {
                let va = self.value(*a);
                let mut d = Array2::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    d.row_mut(r)[range.clone()].copy_from_slice(g.row(r));
                }
                accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                accumulate(adj, *a, Array2::filled(va.rows(), va.cols(), g.item()));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                accumulate(adj, *a, Array2::filled(va.rows(), va.cols(), g.item() / va.len() as f64));
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::RowSum(a) => {
                let va = self.value(*a);
                let mut d = Array2::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let gv = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v = gv);
                }
                accumulate(adj, *a, d);
            }
            Op::Reshape(a) => {
                let va = self.value(*a);
                let d = Array2::from_vec(va.rows(), va.cols(), g.data().to_vec()).expect("same length");
                accumulate(adj, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let va = self.value(*a);
                let mut d = Array2::zeros(va.rows(), va.cols());
                for (out_row, &src) in indices.iter().enumerate() {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(out_row)) {
                        *dv += gv;
                    }
                }
                accumulate(adj, *a, d);
            }
        }
    }
}

fn slice_cols_of(a: &Array2, range: Range<usize>) -> Array2 {
    let width = range.end - range.start;
    let mut data = Vec::with_capacity(a.rows() * width);
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[range.clone()]);
    }
    Array2::from_vec(a.rows(), width, data).expect("slice")
}

fn accumulate(adj: &mut [Option<Array2>], v: Var, d: Array2) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}
