//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation eagerly: the forward value is computed
//! when the operation is recorded and stored on the tape next to the operand
//! handles. [`Tape::backward`] then walks the tape once, from the output back
//! to the first node, accumulating adjoints.
//!
//! Values are row-major matrices ([`Tensor`]); scalars are `1x1` and vectors
//! are either `n x 1` or `1 x n`. Element-wise binary operations broadcast a
//! dimension of size one against any size, which covers scalar, row-bias and
//! column-scaling patterns.
//!
//! ```
//! use skyreach::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.gradient(y, &[x]).unwrap();
//! assert_eq!(tape.scalar_value(y), 9.0);
//! assert_eq!(grads[0].item(), 6.0);
//! ```

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: index {index} out of bounds for {len} elements")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("gradient output must be a scalar, got {0}")]
    OutputNotScalar(Shape),
    #[error("value was not recorded on this tape")]
    NotOnTape,
    #[error("clip bounds inverted: lo {lo} > hi {hi}")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("tensor data length {len} does not match shape {shape}")]
    BadData { shape: Shape, len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AdError> {
        let shape = Shape::new(rows, cols);
        if data.len() != shape.len() {
            return Err(AdError::BadData {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: Shape::new(rows, cols),
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            shape: Shape::new(rows, cols),
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::SCALAR,
            data: vec![v],
        }
    }

    /// Column vector (`n x 1`).
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::new(data.len(), 1),
            data,
        }
    }

    /// Row vector (`1 x n`).
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::new(1, data.len()),
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.rows
    }

    pub fn cols(&self) -> usize {
        self.shape.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape.cols + c]
    }

    /// The single entry of a `1x1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape, Shape::SCALAR);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a recorded value.
///
/// `Var`s are cheap to copy and only meaningful on the tape that produced
/// them; passing one to another tape yields [`AdError::NotOnTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

/// Operation kinds that can be recorded through [`Tape::record`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    RowSum,
    ColSum,
    Sum,
    Exp,
    Log,
    Relu,
    Neg,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Neg(usize),
    MatMul(usize, usize),
    RowSum(usize),
    ColSum(usize),
    Sum(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Clip { x: usize, lo: f64, hi: f64 },
    Gather { x: usize, index: Vec<usize> },
    Scatter { x: usize, index: Vec<usize> },
    Stack(Vec<usize>),
}

impl Op {
    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Neg(a)
            | Op::RowSum(a)
            | Op::ColSum(a)
            | Op::Sum(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a) => vec![*a],
            Op::Clip { x, .. } | Op::Gather { x, .. } | Op::Scatter { x, .. } => vec![*x],
            Op::Stack(ids) => ids.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// False for constants and anything computed only from constants.
    tracked: bool,
}

/// Append-only operation record.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var, shape: Shape) -> Result<Tensor, AdError> {
        if v.tape != self.tape {
            return Err(AdError::NotOnTape);
        }
        Ok(self
            .grads
            .get(v.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(shape.rows, shape.cols)))
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn broadcast(op: &'static str, a: Shape, b: Shape) -> Result<Shape, AdError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows, b.rows), dim(a.cols, b.cols)) {
        (Some(rows), Some(cols)) => Ok(Shape { rows, cols }),
        _ => Err(AdError::ShapeMismatch {
            op,
            lhs: a,
            rhs: b,
        }),
    }
}

#[inline]
fn bidx(s: Shape, r: usize, c: usize) -> usize {
    let r = if s.rows == 1 { 0 } else { r };
    let c = if s.cols == 1 { 0 } else { c };
    r * s.cols + c
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == out && b.shape == out {
        return Tensor {
            shape: out,
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        };
    }
    let mut data = Vec::with_capacity(out.len());
    for r in 0..out.rows {
        for c in 0..out.cols {
            data.push(f(a.data[bidx(a.shape, r, c)], b.data[bidx(b.shape, r, c)]));
        }
    }
    Tensor { shape: out, data }
}

/// Sums a full-shape adjoint down to a (possibly broadcast) operand shape.
fn reduce_to(g: &Tensor, target: Shape) -> Tensor {
    if g.shape == target {
        return g.clone();
    }
    let mut out = Tensor::zeros(target.rows, target.cols);
    for r in 0..g.shape.rows {
        for c in 0..g.shape.cols {
            out.data[bidx(target, r, c)] += g.data[r * g.shape.cols + c];
        }
    }
    out
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape.rows, a.shape.cols, b.shape.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: Shape::new(n, m),
        data: out,
    }
}

/// `a^T b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.shape.rows, a.shape.cols, b.shape.cols);
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b.data[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a.data[p * n + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: Shape::new(n, m),
        data: out,
    }
}

/// `a b^T`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape.rows, a.shape.cols, b.shape.rows);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        shape: Shape::new(n, m),
        data: out,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(AdError::NotOnTape);
        }
        Ok(v.id)
    }

    fn node(&self, v: Var) -> Result<&Node, AdError> {
        let id = self.check(v)?;
        Ok(&self.nodes[id])
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.id].value.data[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.id].value.shape
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.id].tracked
    }

    /// Records `kind` over `operands` (one or two, per arity).
    pub fn record(&mut self, kind: OpKind, operands: &[Var]) -> Result<Var, AdError> {
        let want = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            _ => 1,
        };
        if operands.len() != want {
            return Err(AdError::ShapeMismatch {
                op: "record",
                lhs: Shape::new(operands.len(), 0),
                rhs: Shape::new(want, 0),
            });
        }
        let a = operands[0];
        match kind {
            OpKind::Add => self.add(a, operands[1]),
            OpKind::Sub => self.sub(a, operands[1]),
            OpKind::Mul => self.mul(a, operands[1]),
            OpKind::Div => self.div(a, operands[1]),
            OpKind::MatMul => self.matmul(a, operands[1]),
            OpKind::RowSum => self.row_sum(a),
            OpKind::ColSum => self.col_sum(a),
            OpKind::Sum => self.sum(a),
            OpKind::Exp => self.exp(a),
            OpKind::Log => self.log(a),
            OpKind::Relu => self.relu(a),
            OpKind::Neg => self.neg(a),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AdError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        let out = broadcast(name, na.value.shape, nb.value.shape)?;
        let value = zip_broadcast(&na.value, &nb.value, out, f);
        let tracked = na.tracked || nb.tracked;
        Ok(self.push(make(a.id, b.id), value, tracked))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, AdError> {
        let na = self.node(a)?;
        let value = na.value.map(f);
        let tracked = na.tracked;
        Ok(self.push(op, value, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, AdError> {
        self.unary(a, Op::Scale(a.id, k), |x| k * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Neg(a.id), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Log(a.id), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Relu(a.id), |x| x.max(0.0))
    }

    /// `min(hi, max(lo, x))`; the gradient passes only strictly inside `(lo, hi)`.
    pub fn clip_through(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, AdError> {
        if lo > hi {
            return Err(AdError::InvalidBounds { lo, hi });
        }
        self.unary(a, Op::Clip { x: a.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.value.shape.cols != nb.value.shape.rows {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: na.value.shape,
                rhs: nb.value.shape,
            });
        }
        let value = matmul(&na.value, &nb.value);
        let tracked = na.tracked || nb.tracked;
        Ok(self.push(Op::MatMul(a.id, b.id), value, tracked))
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AdError> {
        let na = self.node(a)?;
        let s = na.value.shape;
        let data = na.value.data.chunks(s.cols.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor {
            shape: Shape::new(s.rows, 1),
            data,
        };
        let tracked = na.tracked;
        Ok(self.push(Op::RowSum(a.id), value, tracked))
    }

    /// Sum over rows: `r x c -> 1 x c`.
    pub fn col_sum(&mut self, a: Var) -> Result<Var, AdError> {
        let na = self.node(a)?;
        let s = na.value.shape;
        let mut data = vec![0.0; s.cols];
        for r in 0..s.rows {
            for (c, d) in data.iter_mut().enumerate() {
                *d += na.value.data[r * s.cols + c];
            }
        }
        let value = Tensor {
            shape: Shape::new(1, s.cols),
            data,
        };
        let tracked = na.tracked;
        Ok(self.push(Op::ColSum(a.id), value, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let na = self.node(a)?;
        let value = Tensor::scalar(na.value.data.iter().sum());
        let tracked = na.tracked;
        Ok(self.push(Op::Sum(a.id), value, tracked))
    }

    /// Picks flat (row-major) entries of `a` into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, index: &[usize], shape: Shape) -> Result<Var, AdError> {
        let na = self.node(a)?;
        if index.len() != shape.len() {
            return Err(AdError::ShapeMismatch {
                op: "gather",
                lhs: Shape::new(index.len(), 1),
                rhs: shape,
            });
        }
        let len = na.value.data.len();
        let mut data = Vec::with_capacity(index.len());
        for &i in index {
            if i >= len {
                return Err(AdError::IndexOutOfBounds {
                    op: "gather",
                    index: i,
                    len,
                });
            }
            data.push(na.value.data[i]);
        }
        let tracked = na.tracked;
        Ok(self.push(
            Op::Gather {
                x: a.id,
                index: index.to_vec(),
            },
            Tensor { shape, data },
            tracked,
        ))
    }

    /// Scatter-adds the entries of `a` into a zero tensor of `shape` at flat `index`.
    pub fn scatter(&mut self, a: Var, index: &[usize], shape: Shape) -> Result<Var, AdError> {
        let na = self.node(a)?;
        if index.len() != na.value.data.len() {
            return Err(AdError::ShapeMismatch {
                op: "scatter",
                lhs: na.value.shape,
                rhs: Shape::new(index.len(), 1),
            });
        }
        let mut out = Tensor::zeros(shape.rows, shape.cols);
        for (k, &i) in index.iter().enumerate() {
            if i >= out.data.len() {
                return Err(AdError::IndexOutOfBounds {
                    op: "scatter",
                    index: i,
                    len: out.data.len(),
                });
            }
            out.data[i] += na.value.data[k];
        }
        let tracked = na.tracked;
        Ok(self.push(
            Op::Scatter {
                x: a.id,
                index: index.to_vec(),
            },
            out,
            tracked,
        ))
    }

    /// Vertical concatenation of operands sharing a column count.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let mut rows = 0;
        let mut cols = None;
        let mut data = Vec::new();
        let mut tracked = false;
        for &p in parts {
            let n = self.node(p)?;
            let s = n.value.shape;
            match cols {
                None => cols = Some(s.cols),
                Some(c) if c != s.cols => {
                    return Err(AdError::ShapeMismatch {
                        op: "stack",
                        lhs: Shape::new(rows, c),
                        rhs: s,
                    })
                }
                _ => {}
            }
            rows += s.rows;
            data.extend_from_slice(&n.value.data);
            tracked |= n.tracked;
        }
        let value = Tensor {
            shape: Shape::new(rows, cols.unwrap_or(0)),
            data,
        };
        Ok(self.push(
            Op::Stack(parts.iter().map(|p| p.id).collect()),
            value,
            tracked,
        ))
    }

    /// One reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, AdError> {
        let out = self.check(output)?;
        let shape = self.nodes[out].value.shape;
        if shape != Shape::SCALAR {
            return Err(AdError::OutputNotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::scalar(1.0));
        let mut visited = 0;
        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            visited += 1;
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    /// `d output / d wrt[i]` for each requested input.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AdError> {
        for &w in wrt {
            self.check(w)?;
        }
        let grads = self.backward(output)?;
        wrt.iter()
            .map(|&w| grads.wrt(w, self.shape(w)))
            .collect()
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let mut acc = |target: usize, contrib: Tensor| {
            if !self.nodes[target].tracked {
                return;
            }
            match &mut grads[target] {
                Some(t) => t.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape));
                acc(*b, reduce_to(g, val(*b).shape));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, val(*a).shape));
                acc(*b, reduce_to(&g.map(|x| -x), val(*b).shape));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].tracked {
                    acc(*a, reduce_to(&zip_broadcast(g, vb, g.shape, |x, y| x * y), va.shape));
                }
                if self.nodes[*b].tracked {
                    acc(*b, reduce_to(&zip_broadcast(g, va, g.shape, |x, y| x * y), vb.shape));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[*a].tracked {
                    acc(*a, reduce_to(&zip_broadcast(g, vb, g.shape, |x, y| x / y), va.shape));
                }
                if self.nodes[*b].tracked {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let y = &node.value;
                    let t = zip_broadcast(g, y, g.shape, |x, q| x * q);
                    let t = zip_broadcast(&t, vb, g.shape, |x, d| -x / d);
                    acc(*b, reduce_to(&t, vb.shape));
                }
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * k)),
            Op::Neg(a) => acc(*a, g.map(|x| -x)),
            Op::MatMul(a, b) => {
                if self.nodes[*a].tracked {
                    acc(*a, matmul_nt(g, val(*b)));
                }
                if self.nodes[*b].tracked {
                    acc(*b, matmul_tn(val(*a), g));
                }
            }
            Op::RowSum(a) => {
                let s = val(*a).shape;
                let mut t = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    for c in 0..s.cols {
                        t.data[r * s.cols + c] = g.data[r];
                    }
                }
                acc(*a, t);
            }
            Op::ColSum(a) => {
                let s = val(*a).shape;
                let mut t = Tensor::zeros(s.rows, s.cols);
                for r in 0..s.rows {
                    t.data[r * s.cols..(r + 1) * s.cols].copy_from_slice(&g.data);
                }
                acc(*a, t);
            }
            Op::Sum(a) => {
                let s = val(*a).shape;
                acc(*a, Tensor::filled(s.rows, s.cols, g.data[0]));
            }
            Op::Exp(a) => acc(*a, zip_broadcast(g, &node.value, g.shape, |x, y| x * y)),
            Op::Log(a) => acc(*a, zip_broadcast(g, val(*a), g.shape, |x, v| x / v)),
            Op::Relu(a) => acc(
                *a,
                zip_broadcast(g, val(*a), g.shape, |x, v| if v > 0.0 { x } else { 0.0 }),
            ),
            Op::Clip { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    zip_broadcast(g, val(*x), g.shape, |d, v| {
                        if v > lo && v < hi {
                            d
                        } else {
                            0.0
                        }
                    }),
                )
            }
            Op::Gather { x, index } => {
                let s = val(*x).shape;
                let mut t = Tensor::zeros(s.rows, s.cols);
                for (k, &i) in index.iter().enumerate() {
                    t.data[i] += g.data[k];
                }
                acc(*x, t);
            }
            Op::Scatter { x, index } => {
                let s = val(*x).shape;
                let data = index.iter().map(|&i| g.data[i]).collect();
                acc(*x, Tensor { shape: s, data });
            }
            Op::Stack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape;
                    let n = s.len();
                    acc(
                        p,
                        Tensor {
                            shape: s,
                            data: g.data[offset..offset + n].to_vec(),
                        },
                    );
                    offset += n;
                }
            }
        }
    }

    /// Number of operand edges reachable from `output`, i.e. the work bound of
    /// one reverse sweep.
    pub fn edge_count(&self, output: Var) -> usize {
        self.nodes[..=output.id]
            .iter()
            .map(|n| n.op.operands().len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Tensor, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.var(x0.clone());
        let y = build(&mut tape, x);
        let g = tape.gradient(y, &[x]).unwrap().remove(0);
        let h = 1e-5;
        for i in 0..x0.data.len() {
            let eval = |delta: f64| {
                let mut t = Tape::new();
                let mut p = x0.clone();
                p.data[i] += delta;
                let xv = t.var(p);
                let y = build(&mut t, xv);
                t.scalar_value(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / fd.abs().max(g.data[i].abs()).max(1.0);
            assert!(err < tol, "entry {i}: fd {fd} vs ad {}", g.data[i]);
        }
    }

    #[test]
    fn scalar_add() {
        let mut t = Tape::new();
        let a = t.scalar_const(2.0);
        let b = t.scalar_const(3.0);
        let c = t.record(OpKind::Add, &[a, b]).unwrap();
        assert_eq!(t.scalar_value(c), 5.0);
    }

    #[test]
    fn relu_negative_is_zero() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(-1.5));
        let y = t.relu(x).unwrap();
        assert_eq!(t.scalar_value(y), 0.0);
        assert_eq!(t.gradient(y, &[x]).unwrap()[0].item(), 0.0);
        let x = t.var(Tensor::scalar(0.0));
        let y = t.relu(x).unwrap();
        assert_eq!(t.gradient(y, &[x]).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let m = Tensor::new(3, 3, (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        let i = t.constant(Tensor::identity(3));
        let mv = t.constant(m.clone());
        let p = t.matmul(i, mv).unwrap();
        assert_eq!(t.value(p), &m);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.gradient(y, &[x]).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn clip_through_cases() {
        for (x0, want, grad) in [(5.0, 5.0, 1.0), (-2.0, 0.0, 0.0), (10.0, 10.0, 0.0)] {
            let mut t = Tape::new();
            let x = t.var(Tensor::scalar(x0));
            let y = t.clip_through(x, 0.0, 10.0).unwrap();
            assert_eq!(t.scalar_value(y), want);
            assert_eq!(t.gradient(y, &[x]).unwrap()[0].item(), grad);
        }
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(1.0));
        assert_eq!(
            t.clip_through(x, 2.0, 1.0),
            Err(AdError::InvalidBounds { lo: 2.0, hi: 1.0 })
        );
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let a = t.var(Tensor::zeros(2, 3));
        let b = t.var(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("2x3"));
        let c = t.var(Tensor::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(AdError::ShapeMismatch { op: "add", .. })));
        assert_eq!(t.gradient(a, &[a]).unwrap_err(), AdError::OutputNotScalar(Shape::new(2, 3)));

        let mut other = Tape::new();
        let foreign = other.var(Tensor::scalar(1.0));
        let s = t.sum(a).unwrap();
        assert_eq!(t.gradient(s, &[foreign]).unwrap_err(), AdError::NotOnTape);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let k = t.constant(Tensor::row(vec![1.0, 2.0]));
        let x = t.var(Tensor::row(vec![0.5, -1.0]));
        let p = t.mul(k, x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.gradient(s, &[k, x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        assert_eq!(g[1].data(), &[1.0, 2.0]);

        let only_const = t.exp(k).unwrap();
        let s = t.sum(only_const).unwrap();
        assert!(!t.is_tracked(s));
        assert_eq!(t.gradient(s, &[x]).unwrap()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_component_matches_finite_differences() {
        let x0 = Tensor::column(vec![0.3, -1.2, 0.8, 1.7]);
        let build = |t: &mut Tape, x: Var| {
            let e = t.exp(x).unwrap();
            let z = t.sum(e).unwrap();
            let p = t.div(e, z).unwrap();
            t.gather(p, &[2], Shape::SCALAR).unwrap()
        };
        fd_check(build, x0, 1e-6);
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let x0 = Tensor::new(3, 2, vec![0.4, -0.7, 1.1, 0.2, -1.5, 0.9]).unwrap();
        fd_check(
            |t, x| {
                let row = t.constant(Tensor::row(vec![0.5, -2.0]));
                let col = t.constant(Tensor::column(vec![1.5, 2.0, 3.0]));
                let a = t.add(x, row).unwrap();
                let b = t.div(a, col).unwrap();
                let rs = t.row_sum(x).unwrap();
                let c = t.mul(b, rs).unwrap();
                let d = t.div(col, rs).unwrap();
                let e = t.add(c, d).unwrap();
                let cs = t.col_sum(e).unwrap();
                let w = t.constant(Tensor::column(vec![0.3, -0.1]));
                let m = t.matmul(cs, w).unwrap();
                let lg = t.exp(m).unwrap();
                let l = t.log(lg).unwrap();
                let sq = t.mul(l, l).unwrap();
                t.sum(sq).unwrap()
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn gather_scatter_stack_adjoints() {
        let x0 = Tensor::column(vec![0.5, 1.5, -0.5]);
        fd_check(
            |t, x| {
                let g = t.gather(x, &[2, 0, 0], Shape::new(3, 1)).unwrap();
                let s = t.scatter(g, &[1, 1, 3], Shape::new(2, 2)).unwrap();
                let sq = t.mul(s, s).unwrap();
                let a = t.sum(sq).unwrap();
                let b = t.scale(a, 0.5).unwrap();
                let st = t.stack(&[a, b]).unwrap();
                let st2 = t.mul(st, st).unwrap();
                t.sum(st2).unwrap()
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn sweep_visits_each_tracked_node_once() {
        let mut t = Tape::new();
        let x = t.var(Tensor::scalar(0.3));
        let mut y = x;
        for _ in 0..50 {
            let e = t.exp(y).unwrap();
            y = t.mul(e, x).unwrap();
        }
        let g = t.backward(y).unwrap();
        assert_eq!(g.visited(), t.len());
        assert!(t.edge_count(y) <= 2 * t.len());
    }
}
