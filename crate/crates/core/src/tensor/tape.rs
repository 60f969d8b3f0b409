//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node; node
//! indices are handed out as [`Var`] handles. Because a node can only refer to
//! nodes recorded before it, insertion order is already a topological order
//! and [`Tape::backward`] simply walks the tape in reverse.
//!
//! Elementwise binary operations broadcast their right operand: it may have
//! the full shape, a single row (`1 x c`), a single column (`r x 1`) or be a
//! `1 x 1` scalar.

use std::sync::Arc;

use super::matrix::{gemm, Matrix, Operand};
use crate::error::{Error, Result};

/// Columns whose standard deviation falls below this are treated as constant.
pub const MIN_STD: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied per segment by [`Tape::segment_reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentReduce {
    Max,
    Mean,
    Sum,
}

/// Identifies which primitive produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Transpose,
    Relu,
    Exp,
    Log,
    ColumnMean,
    ColumnStd,
    Sum,
    SumOfSquares,
    RowSlice,
    ConcatColumns,
    GatherRows,
    SegmentReduce(SegmentReduce),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ColumnMean(Var),
    ColumnStd(Var),
    Sum(Var),
    SumOfSquares(Var),
    RowSlice(Var, usize),
    ConcatColumns(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    Segment {
        input: Var,
        ids: Arc<[usize]>,
        kind: SegmentReduce,
        /// Per-segment row counts (mean) or per-output-entry source rows (max).
        aux: Vec<usize>,
    },
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::MatMul(..) => OpTag::MatMul,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Div(..) => OpTag::Div,
            Op::Scale(..) => OpTag::Scale,
            Op::Transpose(_) => OpTag::Transpose,
            Op::Relu(_) => OpTag::Relu,
            Op::Exp(_) => OpTag::Exp,
            Op::Log(_) => OpTag::Log,
            Op::ColumnMean(_) => OpTag::ColumnMean,
            Op::ColumnStd(_) => OpTag::ColumnStd,
            Op::Sum(_) => OpTag::Sum,
            Op::SumOfSquares(_) => OpTag::SumOfSquares,
            Op::RowSlice(..) => OpTag::RowSlice,
            Op::ConcatColumns(_) => OpTag::ConcatColumns,
            Op::GatherRows(..) => OpTag::GatherRows,
            Op::Segment { kind, .. } => OpTag::SegmentReduce(*kind),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::ColumnMean(a)
            | Op::ColumnStd(a)
            | Op::Sum(a)
            | Op::SumOfSquares(a)
            | Op::RowSlice(a, _)
            | Op::GatherRows(a, _) => vec![*a],
            Op::ConcatColumns(parts) => parts.clone(),
            Op::Segment { input, .. } => vec![*input],
        }
    }
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// A tape is meant to live for one training step. Gradients accumulate in
/// each node's slot across repeated [`backward`](Tape::backward) calls until
/// [`zero_grad`](Tape::zero_grad) clears them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy)]
enum Broadcast {
    Full,
    Row,
    Column,
    Scalar,
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<Self> {
        if rhs == lhs {
            Ok(Broadcast::Full)
        } else if rhs == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if rhs == (1, lhs.1) {
            Ok(Broadcast::Row)
        } else if rhs == (lhs.0, 1) {
            Ok(Broadcast::Column)
        } else {
            Err(Error::Shape { op, lhs, rhs })
        }
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

    /// Records an input matrix.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn parameter(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Copies `v` into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient, `None` if no backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push_raw(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::contract(format!("{op_name} produced a non-finite value")));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- forward primitives -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (x, y) = (self.value(a), self.value(b));
        let bc = Broadcast::resolve(name, x.shape(), y.shape())?;
        let (xd, yd, cols) = (x.data(), y.data(), x.cols());
        let out: Vec<f64> = match bc {
            Broadcast::Full => xd.iter().zip(yd).map(|(&a, &b)| f(a, b)).collect(),
            Broadcast::Scalar => xd.iter().map(|&a| f(a, yd[0])).collect(),
            Broadcast::Row | Broadcast::Column if xd.is_empty() => Vec::new(),
            Broadcast::Row => {
                let mut out = Vec::with_capacity(xd.len());
                for xr in xd.chunks_exact(cols) {
                    out.extend(xr.iter().zip(yd).map(|(&a, &b)| f(a, b)));
                }
                out
            }
            Broadcast::Column => {
                let mut out = Vec::with_capacity(xd.len());
                for (xr, &b) in xd.chunks_exact(cols).zip(yd) {
                    out.extend(xr.iter().map(|&a| f(a, b)));
                }
                out
            }
        };
        Matrix::from_vec(x.rows(), cols, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("subtract", a, b, |x, y| x - y)?;
        self.push("subtract", out, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("elementwise-multiply", a, b, |x, y| x * y)?;
        self.push("elementwise-multiply", out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("divide", a, b, |x, y| x / y)?;
        self.push("divide", out, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push("scalar-multiply", out, Op::Scale(a, s))
    }

    /// `a + s` for a constant scalar `s`.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = self.constant(Matrix::scalar(s));
        self.add(a, c)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a))
    }

    /// `1 x c` row of column means.
    pub fn column_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Shape {
                op: "column-mean",
                lhs: x.shape(),
                rhs: (1, x.cols()),
            });
        }
        let out = column_means(x);
        self.push("column-mean", out, Op::ColumnMean(a))
    }

    /// `1 x c` row of unbiased column standard deviations.
    pub fn column_std(&mut self, a: Var) -> Result<Var> {
        let out = column_std(self.value(a))?;
        self.push("column-std", out, Op::ColumnStd(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn sum_of_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.push("sum-of-squares", Matrix::scalar(s), Op::SumOfSquares(a))
    }

    /// Rows `start..end`.
    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::Shape {
                op: "row-slice",
                lhs: x.shape(),
                rhs: (start, end),
            });
        }
        let cols = x.cols();
        let out = Matrix::from_vec(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
        self.push("row-slice", out, Op::RowSlice(a, start))
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat-columns needs at least one input"));
        };
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(Error::Shape {
                    op: "concat-columns",
                    lhs: (rows, cols),
                    rhs: s,
                });
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let x = self.value(*p);
            let w = x.cols();
            for r in 0..rows {
                out.row_mut(r)[offset..offset + w].copy_from_slice(x.row(r));
            }
            offset += w;
        }
        self.push("concat-columns", out, Op::ConcatColumns(parts.to_vec()))
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Shape {
                op: "gather-rows",
                lhs: x.shape(),
                rhs: (bad, cols),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            data.extend_from_slice(x.row(i));
        }
        let out = Matrix::from_vec(indices.len(), cols, data)?;
        self.push("gather-rows", out, Op::GatherRows(a, indices))
    }

    /// Reduces rows of `a` into `segments` output rows; row `i` belongs to
    /// segment `ids[i]`. Segments receiving no rows yield zeros for every kind.
    pub fn segment_reduce(
        &mut self,
        a: Var,
        ids: Arc<[usize]>,
        segments: usize,
        kind: SegmentReduce,
    ) -> Result<Var> {
        let x = self.value(a);
        if ids.len() != x.rows() {
            return Err(Error::Shape {
                op: "segment-reduce",
                lhs: x.shape(),
                rhs: (ids.len(), 1),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&s| s >= segments) {
            return Err(Error::contract(format!(
                "segment-reduce: segment id {bad} out of range 0..{segments}"
            )));
        }
        let cols = x.cols();
        let mut out = Matrix::zeros(segments, cols);
        let aux = match kind {
            SegmentReduce::Sum | SegmentReduce::Mean => {
                let mut counts = vec![0usize; segments];
                for (r, &s) in ids.iter().enumerate() {
                    counts[s] += 1;
                    for (o, v) in out.row_mut(s).iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                if kind == SegmentReduce::Mean {
                    for (s, &n) in counts.iter().enumerate() {
                        if n > 0 {
                            let inv = 1.0 / n as f64;
                            out.row_mut(s).iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                }
                counts
            }
            SegmentReduce::Max => {
                let mut arg = vec![usize::MAX; segments * cols];
                for (r, &s) in ids.iter().enumerate() {
                    let row = x.row(r);
                    for c in 0..cols {
                        let slot = s * cols + c;
                        if arg[slot] == usize::MAX || row[c] > out.data()[slot] {
                            arg[slot] = r;
                            out.data_mut()[slot] = row[c];
                        }
                    }
                }
                arg
            }
        };
        self.push(
            "segment-reduce",
            out,
            Op::Segment {
                input: a,
                ids,
                kind,
                aux,
            },
        )
    }

    // ---- reverse pass -------------------------------------------------------

    /// Propagates d(root)/d(node) to every ancestor of a `1 x 1` root and adds
    /// the result into each node's gradient slot.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 root, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    /// Adds `g` into the pass-local gradient of `v`, copying on first touch.
    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: &Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(g),
            None => grads[v.0] = Some(g.clone()),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(Operand::plain(g), Operand::t(bv), ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(Operand::t(av), Operand::plain(g), gb, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g);
                let bshape = self.shape(*b);
                if let Some(gb) = self.slot(grads, *b) {
                    reduce_broadcast(g, bshape, gb, |_, x| sign * x);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = Broadcast::resolve("", av.shape(), bv.shape()).expect("checked");
                let cols = av.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    let ga = ga.data_mut();
                    for_each_broadcast(g.data(), bv.data(), cols, bc, |k, gv, y| ga[k] += gv * y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let ad = av.data();
                    reduce_broadcast(g, bv.shape(), gb, |k, x| x * ad[k]);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = Broadcast::resolve("", av.shape(), bv.shape()).expect("checked");
                let cols = av.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    let ga = ga.data_mut();
                    for_each_broadcast(g.data(), bv.data(), cols, bc, |k, gv, y| ga[k] += gv / y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // d(x / y)/dy = -out / y
                    let out = node.value.data();
                    let mut scratch = vec![0.0; g.len()];
                    for_each_broadcast(g.data(), bv.data(), cols, bc, |k, gv, y| {
                        scratch[k] = -gv * out[k] / y;
                    });
                    let scratch = Matrix::from_vec(g.rows(), cols, scratch).expect("same shape");
                    reduce_broadcast(&scratch, bv.shape(), gb, |_, x| x);
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * x;
                    }
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.add_assign(&g.transpose());
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), gi) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *o += if *x > 0.0 { *gi } else { 0.0 };
                    }
                }
            }
            Op::Exp(a) => {
                let out = &node.value;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, y), gi) in ga.data_mut().iter_mut().zip(out.data()).zip(g.data()) {
                        *o += gi * y;
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), gi) in ga.data_mut().iter_mut().zip(av.data()).zip(g.data()) {
                        *o += gi / x;
                    }
                }
            }
            Op::ColumnMean(a) => {
                let n = self.shape(*a).0 as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    let cols = ga.cols();
                    for r in 0..ga.rows() {
                        for c in 0..cols {
                            ga.data_mut()[r * cols + c] += g.data()[c] / n;
                        }
                    }
                }
            }
            Op::ColumnStd(a) => {
                let av = self.value(*a);
                let mean = column_means(av);
                let std = &node.value;
                let denom = (av.rows() - 1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    let cols = ga.cols();
                    for r in 0..ga.rows() {
                        for c in 0..cols {
                            let dx = (av.get(r, c) - mean.data()[c]) / (denom * std.data()[c]);
                            ga.data_mut()[r * cols + c] += g.data()[c] * dx;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
            Op::SumOfSquares(a) => {
                let s = g.data()[0];
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, x) in ga.data_mut().iter_mut().zip(av.data()) {
                        *o += 2.0 * s * x;
                    }
                }
            }
            Op::RowSlice(a, start) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let cols = ga.cols();
                    let dst = &mut ga.data_mut()[start * cols..start * cols + g.len()];
                    for (o, x) in dst.iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
            }
            Op::ConcatColumns(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if let Some(gp) = self.slot(grads, *p) {
                        for r in 0..g.rows() {
                            for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += x;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows(a, indices) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &src) in indices.iter().enumerate() {
                        for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Segment {
                input,
                ids,
                kind,
                aux,
            } => {
                if let Some(ga) = self.slot(grads, *input) {
                    let cols = ga.cols();
                    match kind {
                        SegmentReduce::Sum | SegmentReduce::Mean => {
                            for (r, &s) in ids.iter().enumerate() {
                                let w = if *kind == SegmentReduce::Mean {
                                    1.0 / aux[s] as f64
                                } else {
                                    1.0
                                };
                                for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                                    *o += w * x;
                                }
                            }
                        }
                        SegmentReduce::Max if cols > 0 => {
                            let gad = ga.data_mut();
                            for (args, gs) in aux.chunks_exact(cols).zip(g.data().chunks_exact(cols)) {
                                for (c, (&src, &x)) in args.iter().zip(gs).enumerate() {
                                    if src != usize::MAX {
                                        gad[src * cols + c] += x;
                                    }
                                }
                            }
                        }
                        SegmentReduce::Max => {}
                    }
                }
            }
        }
    }
}

/// Calls `f(k, x[k], y[bc(k)])` for every flat index `k` of `x`.
#[inline]
fn for_each_broadcast(x: &[f64], y: &[f64], cols: usize, bc: Broadcast, mut f: impl FnMut(usize, f64, f64)) {
    if x.is_empty() {
        return;
    }
    match bc {
        Broadcast::Full => {
            for (k, (&a, &b)) in x.iter().zip(y).enumerate() {
                f(k, a, b);
            }
        }
        Broadcast::Row => {
            for (r, xr) in x.chunks_exact(cols).enumerate() {
                for (c, (&a, &b)) in xr.iter().zip(y).enumerate() {
                    f(r * cols + c, a, b);
                }
            }
        }
        Broadcast::Column => {
            for (r, (xr, &b)) in x.chunks_exact(cols).zip(y).enumerate() {
                for (c, &a) in xr.iter().enumerate() {
                    f(r * cols + c, a, b);
                }
            }
        }
        Broadcast::Scalar => {
            let b = y[0];
            for (k, &a) in x.iter().enumerate() {
                f(k, a, b);
            }
        }
    }
}

/// Adds `f(k, g[k])` into `out`, summing over broadcast dimensions.
fn reduce_broadcast(g: &Matrix, target: (usize, usize), out: &mut Matrix, f: impl Fn(usize, f64) -> f64) {
    let bc = Broadcast::resolve("", g.shape(), target).expect("checked on forward");
    let cols = g.cols();
    let gd = g.data();
    let od = out.data_mut();
    if gd.is_empty() {
        return;
    }
    match bc {
        Broadcast::Full => {
            for (k, (o, &x)) in od.iter_mut().zip(gd).enumerate() {
                *o += f(k, x);
            }
        }
        Broadcast::Row => {
            for (r, gr) in gd.chunks_exact(cols).enumerate() {
                for (c, (o, &x)) in od.iter_mut().zip(gr).enumerate() {
                    *o += f(r * cols + c, x);
                }
            }
        }
        Broadcast::Column => {
            for (r, (gr, o)) in gd.chunks_exact(cols).zip(od.iter_mut()).enumerate() {
                *o += gr
                    .iter()
                    .enumerate()
                    .map(|(c, &x)| f(r * cols + c, x))
                    .sum::<f64>();
            }
        }
        Broadcast::Scalar => {
            od[0] += gd.iter().enumerate().map(|(k, &x)| f(k, x)).sum::<f64>();
        }
    }
}

pub(crate) fn column_means(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let n = x.rows() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    out
}

/// Unbiased per-column standard deviation; errors on constant columns.
pub(crate) fn column_std(x: &Matrix) -> Result<Matrix> {
    if x.rows() < 2 {
        return Err(Error::Shape {
            op: "column-std",
            lhs: x.shape(),
            rhs: (2, x.cols()),
        });
    }
    let mean = column_means(x);
    let mut out = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        for ((o, v), m) in out.data_mut().iter_mut().zip(x.row(r)).zip(mean.data()) {
            *o += (v - m) * (v - m);
        }
    }
    let denom = (x.rows() - 1) as f64;
    for (column, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v / denom).sqrt();
        // NaN fails this test too
        if !(*v >= MIN_STD) {
            return Err(Error::DegenerateScale {
                op: "column-std",
                column,
                std: *v,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn forward_examples() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1., 2.], &[3., 4.]]));
        let b = t.constant(m(&[&[1.], &[1.]]));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[3., 7.]);

        let x = t.constant(m(&[&[-1., 2.]]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0., 2.]);

        let cm = t.column_mean(a).unwrap();
        assert_eq!(t.value(cm).data(), &[2., 3.]);
        assert_eq!(t.op_tag(cm), OpTag::ColumnMean);
        assert_eq!(t.parents(cm), vec![a]);
    }

    #[test]
    fn bilinear_gradient_is_other_factor() {
        let mut t = Tape::new();
        let a = t.parameter(m(&[&[1., -2.], &[0.5, 3.]]));
        let b = t.constant(m(&[&[4., 5.], &[-6., 7.]]));
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), t.value(b));
        assert!(t.grad(b).is_none() || t.grad(b).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut t = Tape::new();
        let a = t.parameter(Matrix::scalar(3.0));
        let s = t.sum_of_squares(a).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[6.0]);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[12.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let a = t.parameter(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(3, 2));
        let err = t.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        assert!(t.matmul(a, a).is_err());
        assert!(t.row_slice(a, 1, 3).is_err());
    }

    #[test]
    fn constant_column_std_is_degenerate() {
        let mut t = Tape::new();
        let a = t.constant(m(&[&[1., 2.], &[1., 3.]]));
        match t.column_std(a) {
            Err(Error::DegenerateScale { column, .. }) => assert_eq!(column, 0),
            other => panic!("expected degenerate-scale error, got {other:?}"),
        }
        let one_row = t.constant(m(&[&[1., 2.]]));
        assert!(t.column_std(one_row).is_err());
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut t = Tape::new();
        let a = t.parameter(m(&[&[0.0, 1.0]]));
        let r = t.relu(a).unwrap();
        let s = t.sum(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn segment_reduce_empty_segments_are_zero() {
        let mut t = Tape::new();
        let x = t.parameter(m(&[&[1.0], &[3.0], &[-2.0]]));
        let ids: Arc<[usize]> = vec![0, 0, 2].into();
        for kind in [SegmentReduce::Max, SegmentReduce::Mean, SegmentReduce::Sum] {
            let y = t.segment_reduce(x, ids.clone(), 3, kind).unwrap();
            let expect = match kind {
                SegmentReduce::Max => [3.0, 0.0, -2.0],
                SegmentReduce::Mean => [2.0, 0.0, -2.0],
                SegmentReduce::Sum => [4.0, 0.0, -2.0],
            };
            assert_eq!(t.value(y).data(), &expect);
        }
        let y = t.segment_reduce(x, ids, 3, SegmentReduce::Max).unwrap();
        let s = t.sum(y).unwrap();
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let a = t.parameter(Matrix::scalar(2.0));
        let d = t.detach(a);
        let p = t.mul(a, d).unwrap();
        t.backward(p).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[2.0]);
    }

    #[test]
    fn forward_leaves_inputs_untouched() {
        let mut t = Tape::new();
        let x0 = m(&[&[1.0, -1.0], &[0.5, 2.0]]);
        let a = t.parameter(x0.clone());
        let b = t.transpose(a).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_of_squares(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.value(a), &x0);
    }
}
