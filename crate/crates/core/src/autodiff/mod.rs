//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on a [`Tape`] is a 2-D matrix. Operations are evaluated
//! eagerly and recorded. [`Tape::grad`] walks the tape backwards and expresses
//! every adjoint with the same recorded operations, so a gradient is itself a
//! differentiable [`Var`]. Differentiating a loss that contains `∇ₓ g` with
//! respect to parameters is therefore just a second call to `grad`.
//!
//! Binary element-wise operations broadcast along any axis of extent 1 in
//! either operand; the backward pass sums the adjoint back down to the
//! operand's shape.
//!
//! ReLU uses the subgradient 0 at exactly 0. `clamp_min` passes gradient only
//! where the input is strictly above the bound.

mod params;

pub use params::{Parameter, ParameterStore};

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Sqrt(usize),
    Relu(usize),
    Abs(usize),
    ClampMin(usize, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    Broadcast(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | Offset(a) | Transpose(a) | Sin(a) | Cos(a) | Exp(a)
            | Sqrt(a) | Relu(a) | Abs(a) | ClampMin(a, _) | SumAll(a) | SumRows(a)
            | SumCols(a) | Broadcast(a) | SliceCols(a, _) | PadCols(a, _) => vec![*a],
            ConcatCols(v) => v.clone(),
        }
    }
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
}

/// Records matrix operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
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

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn shape_of(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn binary(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let shape = broadcast_shape(shape_of(a), shape_of(b)).unwrap_or_else(|| {
        panic!(
            "incompatible shapes {:?} and {:?}",
            shape_of(a),
            shape_of(b)
        )
    });
    let av = a.broadcast(shape).unwrap();
    let bv = b.broadcast(shape).unwrap();
    Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&self, value: Arc<Matrix>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that gradients may be taken with respect to.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// A leaf sharing storage with the caller (used for parameters).
    pub fn var_shared(&self, value: Arc<Matrix>) -> Var<'_> {
        self.push_arc(value, Op::Leaf)
    }

    /// A leaf the caller never differentiates against. Identical to
    /// [`Tape::var`] on the tape; the distinction documents intent.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var<'_>) -> Arc<Matrix> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op.clone()
    }

    fn var_at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of the scalar `root` with respect to each of `wrt`.
    ///
    /// The returned vars are recorded on the tape and can be differentiated
    /// again. Leaves that `root` does not depend on get a zero matrix.
    pub fn grad<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if root.shape() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let n = root.id + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !relevant[id] {
                    relevant[id] = nodes[id].op.parents().iter().any(|&p| relevant[p]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; n];
        if relevant[root.id] {
            adjoint[root.id] = Some(self.scalar(1.0));
        }
        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            let op = self.op(id);
            let out = self.var_at(id);
            let mut send = |parent: usize, contribution: Var<'t>| {
                if !relevant[parent] {
                    return;
                }
                adjoint[parent] = Some(match adjoint[parent] {
                    Some(acc) => acc + contribution,
                    None => contribution,
                });
            };
            let v = |i: usize| self.var_at(i);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if relevant[a] {
                        send(a, g.sum_to(v(a).shape()));
                    }
                    if relevant[b] {
                        send(b, g.sum_to(v(b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if relevant[a] {
                        send(a, g.sum_to(v(a).shape()));
                    }
                    if relevant[b] {
                        send(b, (-g).sum_to(v(b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if relevant[a] {
                        send(a, (g * v(b)).sum_to(v(a).shape()));
                    }
                    if relevant[b] {
                        send(b, (g * v(a)).sum_to(v(b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    if relevant[a] {
                        send(a, (g / v(b)).sum_to(v(a).shape()));
                    }
                    if relevant[b] {
                        send(b, (-(g * out) / v(b)).sum_to(v(b).shape()));
                    }
                }
                Op::Neg(a) => send(a, -g),
                Op::Scale(a, c) => send(a, g * c),
                Op::Offset(a) => send(a, g),
                Op::MatMul(a, b) => {
                    if relevant[a] {
                        send(a, g.matmul(v(b).t()));
                    }
                    if relevant[b] {
                        send(b, v(a).t().matmul(g));
                    }
                }
                Op::Transpose(a) => send(a, g.t()),
                Op::Sin(a) => send(a, g * v(a).cos()),
                Op::Cos(a) => send(a, -(g * v(a).sin())),
                Op::Exp(a) => send(a, g * out),
                Op::Sqrt(a) => send(a, g / (out * 2.0)),
                Op::Relu(a) => {
                    let mask = v(a).value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    send(a, g * self.constant(mask));
                }
                Op::Abs(a) => {
                    let sign = v(a).value().mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    send(a, g * self.constant(sign));
                }
                Op::ClampMin(a, lo) => {
                    let mask = v(a).value().mapv(|x| if x > lo { 1.0 } else { 0.0 });
                    send(a, g * self.constant(mask));
                }
                Op::SumAll(a) | Op::SumRows(a) | Op::SumCols(a) => {
                    send(a, g.broadcast_to(v(a).shape()))
                }
                Op::Broadcast(a) => send(a, g.sum_to(v(a).shape())),
                Op::SliceCols(a, start) => send(a, g.pad_cols(start, v(a).shape().1)),
                Op::PadCols(a, start) => send(a, g.slice_cols(start, v(a).shape().1)),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = v(p).shape().1;
                        if relevant[p] {
                            send(p, g.slice_cols(start, width));
                        }
                        start += width;
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Matrix::zeros(w.shape())),
            })
            .collect())
    }

    /// Like [`Tape::grad`] but returns plain matrices.
    pub fn gradients<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Matrix>> {
        Ok(self
            .grad(root, wrt)?
            .into_iter()
            .map(|g| g.value().as_ref().clone())
            .collect())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Matrix> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> (usize, usize) {
        shape_of(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a 1×1 var.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(shape_of(&v), (1, 1));
        v[[0, 0]]
    }

    fn unary(self, f: impl Fn(&Matrix) -> Matrix, op: Op) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let value = binary(&self.value(), &other.value(), f);
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let value = self.value().dot(other.value().as_ref());
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(|m| m.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(|m| m.mapv(f64::sin), Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(|m| m.mapv(f64::cos), Op::Cos(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|m| m.mapv(f64::exp), Op::Exp(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(|m| m.mapv(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|m| m.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(|m| m.mapv(f64::abs), Op::Abs(self.id))
    }

    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(|m| m.mapv(|x| x.max(lo)), Op::ClampMin(self.id, lo))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|m| Matrix::from_elem((1, 1), m.sum()), Op::SumAll(self.id))
    }

    /// Sums over rows, giving a `1 × cols` row vector.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(|m| m.sum_axis(Axis(0)).insert_axis(Axis(0)), Op::SumRows(self.id))
    }

    /// Sums over columns, giving a `rows × 1` column vector.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(|m| m.sum_axis(Axis(1)).insert_axis(Axis(1)), Op::SumCols(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum() * (1.0 / (r * c) as f64)
    }

    pub fn broadcast_to(self, shape: (usize, usize)) -> Var<'t> {
        if self.shape() == shape {
            return self;
        }
        self.unary(
            |m| {
                m.broadcast(shape)
                    .unwrap_or_else(|| panic!("cannot broadcast {:?} to {shape:?}", shape_of(m)))
                    .to_owned()
            },
            Op::Broadcast(self.id),
        )
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(self, shape: (usize, usize)) -> Var<'t> {
        let mut out = self;
        let (r, c) = out.shape();
        if shape.0 == 1 && r != 1 {
            out = out.sum_rows();
        }
        if shape.1 == 1 && c != 1 {
            out = out.sum_cols();
        }
        debug_assert_eq!(out.shape(), shape);
        out
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Var<'t> {
        let value = self.value().slice(s![.., start..start + width]).to_owned();
        self.tape.push(value, Op::SliceCols(self.id, start))
    }

    /// Embeds `self` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let src = self.value();
        let mut value = Matrix::zeros((src.nrows(), total));
        value
            .slice_mut(s![.., start..start + src.ncols()])
            .assign(src.as_ref());
        self.tape.push(value, Op::PadCols(self.id, start))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero parts");
        let tape = parts[0].tape;
        let values: Vec<Arc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts must match");
        tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Row-wise softmax. The row maximum is subtracted as a constant, which
    /// leaves both value and derivatives unchanged.
    pub fn softmax_rows(self) -> Var<'t> {
        let shift = self
            .value()
            .map_axis(Axis(1), |row| row.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(1));
        let e = (self - self.tape.constant(shift)).exp();
        e / e.sum_cols()
    }

    /// Euclidean norm of each row (`rows × 1`).
    pub fn norm_rows(self) -> Var<'t> {
        self.square().sum_cols().sqrt()
    }

    /// Rows scaled to unit length; norms are clamped below at `eps`.
    ///
    /// The clamp acts on the squared norm, so an all-zero row has a zero
    /// gradient instead of a `0/0` through the square root.
    pub fn normalize_rows(self, eps: f64) -> Var<'t> {
        self / self.square().sum_cols().clamp_min(eps * eps).sqrt()
    }

    /// Row-wise dot product (`rows × 1`).
    pub fn dot_rows(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum_cols()
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident, $f:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.binary(rhs, $f, Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);
binary_op!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(|m| m.mapv(|x| -x), Op::Neg(self.id))
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.unary(|m| m.mapv(|x| x * c), Op::Scale(self.id, c))
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.unary(|m| m.mapv(|x| x + c), Op::Offset(self.id))
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self + (-c)
    }
}
