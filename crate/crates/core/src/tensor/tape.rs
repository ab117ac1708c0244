//! Reverse-mode differentiation over a linear record of array operations.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order and the backward sweep walks them in reverse.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::array::{gemm, gemm_nt, gemm_tn};
use super::{Array, Real, Segments, TensorError};

/// Pointwise nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    /// Tanh approximation.
    #[default]
    Gelu,
    Softplus,
    Tanh,
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: Real) -> Real {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: Real) -> Real {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, Real),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sqrt(usize),
    Act(usize, Activation),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    /// Flat source position of the winner for each output element.
    MaxAxis(usize, Vec<usize>),
    Softmax(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    BroadcastRows(usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ScatterAddRows(usize, Arc<Vec<usize>>),
    SegmentSum(usize, Arc<Segments>),
    SegmentMean(usize, Arc<Segments>),
    /// Winning source row for each (group, column).
    SegmentMax(usize, Vec<usize>),
    Expand(usize, Arc<Segments>),
    SegmentSoftmax(usize, Arc<Segments>),
    RepeatCols(usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Exp(a)
            | Log(a)
            | Abs(a)
            | Sqrt(a)
            | Act(a, _)
            | SumAll(a)
            | MeanAll(a)
            | SumAxis(a, _)
            | MeanAxis(a, _)
            | MaxAxis(a, _)
            | Softmax(a, _)
            | SliceCols(a, _)
            | BroadcastRows(a)
            | GatherRows(a, _)
            | ScatterAddRows(a, _)
            | SegmentSum(a, _)
            | SegmentMean(a, _)
            | SegmentMax(a, _)
            | Expand(a, _)
            | SegmentSoftmax(a, _)
            | RepeatCols(a, _) => {
                vec![*a]
            }
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Rc<Array>,
    op: Op,
    tracked: bool,
}

/// Single-owner operation record.
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
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` did not influence it.
    pub fn wrt(&self, v: Var<'_>) -> Array {
        self.get(v.id)
    }

    pub fn get(&self, id: usize) -> Array {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[id]),
        }
    }

    pub fn take(&mut self, v: Var<'_>) -> Array {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => Array::zeros(&self.shapes[v.id]),
        }
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len().max(1) {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    if shape.is_empty() {
        return Ok((1, 1, 1));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if !s.is_empty() {
        s[axis] = 1;
    }
    s
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, a: &Array) -> Result<(usize, usize), TensorError> {
    if a.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            got: a.shape().to_vec(),
        });
    }
    Ok((a.shape()[0], a.shape()[1]))
}

/// A row operand is `[C]` or `[1, C]`.
fn row_len(op: &'static str, a: &Array, row: &Array) -> Result<usize, TensorError> {
    let (_, c) = require_matrix(op, a)?;
    let ok = match row.shape() {
        [n] => *n == c,
        [1, n] => *n == c,
        _ => false,
    };
    if !ok {
        return Err(mismatch(op, a, row));
    }
    Ok(c)
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

    /// Records a differentiable input.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_unchecked(value, Op::Constant, false)
    }

    fn push_unchecked(&self, value: Array, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Array, op: Op) -> Result<Var<'_>, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].tracked)
        };
        Ok(self.push_unchecked(value, op, tracked))
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulates d`loss`/d(every tracked node) and returns the leaf gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..nodes.len()).map(|_| None).collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.id] = Some(Array::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = &grads[id] {
                    if !g.all_finite() {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                }
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |pid: usize, pg: Array| {
                if !nodes[pid].tracked {
                    return;
                }
                match &mut grads[pid] {
                    Some(existing) => existing.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            };
            backprop(&nodes, node, &g, &mut acc);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Array, acc: &mut impl FnMut(usize, Array)) {
    let val = |id: usize| -> &Array { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            let da = gemm_nt(g.data(), bv.data(), m, n, k);
            let db = gemm_tn(av.data(), g.data(), m, k, n);
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
            acc(*b, Array::new(bv.shape().to_vec(), db).unwrap());
        }
        Op::Add(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(*a, g.clone());
            acc(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv));
            acc(*b, g.zip_map(val(*a), |gv, av| gv * av));
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            acc(*a, g.zip_map(bv, |gv, bv| gv / bv));
            let mut db = g.zip_map(val(*a), |gv, av| gv * av);
            for (d, &bv) in db.data_mut().iter_mut().zip(bv.data()) {
                *d = -*d / (bv * bv);
            }
            acc(*b, db);
        }
        Op::AddRow(a, row) => {
            let c = g.cols();
            let mut dr = vec![0.0; c];
            for r in 0..g.rows() {
                for (d, &gv) in dr.iter_mut().zip(g.row(r)) {
                    *d += gv;
                }
            }
            acc(*a, g.clone());
            acc(*row, Array::new(val(*row).shape().to_vec(), dr).unwrap());
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (val(*a), val(*row));
            let c = g.cols();
            let mut da = g.clone();
            let mut dr = vec![0.0; c];
            for r in 0..g.rows() {
                let grow = g.row(r);
                let arow = av.row(r);
                for j in 0..c {
                    da.data_mut()[r * c + j] = grow[j] * rv.data()[j];
                    dr[j] += grow[j] * arow[j];
                }
            }
            acc(*a, da);
            acc(*row, Array::new(rv.shape().to_vec(), dr).unwrap());
        }
        Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
        Op::AddScalar(a) => acc(*a, g.clone()),
        Op::Exp(a) => acc(*a, g.zip_map(out, |gv, o| gv * o)),
        Op::Log(a) => acc(*a, g.zip_map(val(*a), |gv, av| gv / av)),
        Op::Abs(a) => acc(
            *a,
            g.zip_map(val(*a), |gv, av| {
                if av > 0.0 {
                    gv
                } else if av < 0.0 {
                    -gv
                } else {
                    0.0
                }
            }),
        ),
        Op::Sqrt(a) => acc(*a, g.zip_map(out, |gv, o| if o > 0.0 { 0.5 * gv / o } else { 0.0 })),
        Op::Act(a, f) => acc(*a, g.zip_map(val(*a), |gv, av| gv * f.derivative(av))),
        Op::SumAll(a) => {
            let gv = g.data()[0];
            acc(*a, Array::full(val(*a).shape(), gv));
        }
        Op::MeanAll(a) => {
            let av = val(*a);
            let gv = g.data()[0] / av.len() as Real;
            acc(*a, Array::full(av.shape(), gv));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let av = val(*a);
            let (outer, len, inner) = axis_layout(av.shape(), *axis).unwrap();
            let scale = if matches!(node.op, Op::MeanAxis(..)) {
                1.0 / len as Real
            } else {
                1.0
            };
            let mut da = vec![0.0; av.len()];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        da[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                    }
                }
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::MaxAxis(a, winners) => {
            let av = val(*a);
            let mut da = vec![0.0; av.len()];
            for (k, &w) in winners.iter().enumerate() {
                da[w] += g.data()[k];
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_layout(out.shape(), *axis).unwrap();
            let y = out.data();
            let mut da = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: Real = (0..len).map(|l| g.data()[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        da[at(l)] = y[at(l)] * (g.data()[at(l)] - dot);
                    }
                }
            }
            acc(*a, Array::new(out.shape().to_vec(), da).unwrap());
        }
        Op::ConcatCols(parts) => {
            let n = g.rows();
            let total = g.cols();
            let mut start = 0;
            for &p in parts {
                let pv = val(p);
                let w = pv.cols();
                let mut dp = Vec::with_capacity(n * w);
                for r in 0..n {
                    dp.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                }
                acc(p, Array::new(pv.shape().to_vec(), dp).unwrap());
                start += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let pv = val(p);
                let n = pv.len();
                acc(
                    p,
                    Array::new(pv.shape().to_vec(), g.data()[start..start + n].to_vec()).unwrap(),
                );
                start += n;
            }
        }
        Op::SliceCols(a, start) => {
            let av = val(*a);
            let (n, c) = (av.rows(), av.cols());
            let w = g.cols();
            let mut da = vec![0.0; av.len()];
            for r in 0..n {
                da[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::BroadcastRows(a) => {
            let av = val(*a);
            let c = g.cols();
            let mut da = vec![0.0; c];
            for r in 0..g.rows() {
                for (d, &gv) in da.iter_mut().zip(g.row(r)) {
                    *d += gv;
                }
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let c = av.cols();
            let mut da = vec![0.0; av.len()];
            for (r, &src) in idx.iter().enumerate() {
                for (d, &gv) in da[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                    *d += gv;
                }
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::ScatterAddRows(a, idx) => {
            let av = val(*a);
            let c = av.cols();
            let mut da = Vec::with_capacity(av.len());
            for &dst in idx.iter() {
                da.extend_from_slice(&g.data()[dst * c..(dst + 1) * c]);
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::SegmentSum(a, seg) | Op::SegmentMean(a, seg) => {
            let av = val(*a);
            let c = av.cols();
            let mean = matches!(node.op, Op::SegmentMean(..));
            let mut da = vec![0.0; av.len()];
            for (grp, members) in seg.groups().enumerate() {
                let scale = if mean { 1.0 / members.len() as Real } else { 1.0 };
                for &m in members {
                    for j in 0..c {
                        da[m * c + j] = g.data()[grp * c + j] * scale;
                    }
                }
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::SegmentMax(a, winners) => {
            let av = val(*a);
            let c = av.cols();
            let mut da = vec![0.0; av.len()];
            for (k, &w) in winners.iter().enumerate() {
                da[w * c + k % c] += g.data()[k];
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::Expand(a, seg) => {
            let av = val(*a);
            let c = av.cols();
            let mut da = vec![0.0; av.len()];
            for (grp, members) in seg.groups().enumerate() {
                let drow = &mut da[grp * c..(grp + 1) * c];
                for &m in members {
                    for (d, &gv) in drow.iter_mut().zip(g.row(m)) {
                        *d += gv;
                    }
                }
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
        Op::SegmentSoftmax(a, seg) => {
            let c = out.cols();
            let y = out.data();
            let mut da = vec![0.0; y.len()];
            for members in seg.groups() {
                for j in 0..c {
                    let dot: Real = members.iter().map(|&m| g.data()[m * c + j] * y[m * c + j]).sum();
                    for &m in members {
                        da[m * c + j] = y[m * c + j] * (g.data()[m * c + j] - dot);
                    }
                }
            }
            acc(*a, Array::new(out.shape().to_vec(), da).unwrap());
        }
        Op::RepeatCols(a, times) => {
            let av = val(*a);
            let (n, k) = (av.rows(), av.cols());
            let mut da = vec![0.0; av.len()];
            for r in 0..n {
                let grow = g.row(r);
                for l in 0..k {
                    da[r * k + l] = grow[l * times..(l + 1) * times].iter().sum();
                }
            }
            acc(*a, Array::new(av.shape().to_vec(), da).unwrap());
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        self.tape.push(name, a.zip_map(&b, f), op)
    }

    fn unary(&self, name: &'static str, f: impl Fn(Real) -> Real, op: Op) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        self.tape.push(name, a.map(f), op)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = require_matrix("matmul", &a)?;
        let (k2, n) = require_matrix("matmul", &b)?;
        if k != k2 {
            return Err(mismatch("matmul", &a, &b));
        }
        let out = Array::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))?;
        self.tape.push("matmul", out, Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// `self[i, :] + row` for every row `i`.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, r) = (self.value(), row.value());
        let c = row_len("add_row", &a, &r)?;
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &rv) in chunk.iter_mut().zip(r.data()) {
                *o += rv;
            }
        }
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id))
    }

    /// `self[i, :] ⊙ row` for every row `i`.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let (a, r) = (self.value(), row.value());
        let c = row_len("mul_row", &a, &r)?;
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &rv) in chunk.iter_mut().zip(r.data()) {
                *o *= rv;
            }
        }
        self.tape.push("mul_row", out, Op::MulRow(self.id, row.id))
    }

    pub fn scale(&self, s: Real) -> Result<Var<'t>, TensorError> {
        self.unary("scale", |v| v * s, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Result<Var<'t>, TensorError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: Real) -> Result<Var<'t>, TensorError> {
        self.unary("add_scalar", |v| v + s, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>, TensorError> {
        self.unary("exp", Real::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>, TensorError> {
        self.unary("log", Real::ln, Op::Log(self.id))
    }

    pub fn abs(&self) -> Result<Var<'t>, TensorError> {
        self.unary("abs", Real::abs, Op::Abs(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t>, TensorError> {
        self.unary("sqrt", Real::sqrt, Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>, TensorError> {
        self.mul(self)
    }

    pub fn act(&self, f: Activation) -> Result<Var<'t>, TensorError> {
        self.unary("activation", |v| f.apply(v), Op::Act(self.id, f))
    }

    pub fn sum(&self) -> Result<Var<'t>, TensorError> {
        let s = self.value().sum();
        self.tape.push("sum", Array::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        if a.is_empty() {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        let m = a.sum() / a.len() as Real;
        self.tape.push("mean", Array::scalar(m), Op::MeanAll(self.id))
    }

    fn axis_reduce(&self, axis: usize, mean: bool) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (outer, len, inner) = axis_layout(a.shape(), axis)?;
        if len == 0 && mean {
            return Err(TensorError::EmptyAxis { op: "mean_axis" });
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += a.data()[(o * len + l) * inner + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as Real;
            }
        }
        let out = Array::new(reduced_shape(a.shape(), axis), out)?;
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        self.tape.push(if mean { "mean_axis" } else { "sum_axis" }, out, op)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.axis_reduce(axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        self.axis_reduce(axis, true)
    }

    /// Max along `axis` (first winner on ties), keeping it with extent 1.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (outer, len, inner) = axis_layout(a.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "max_axis" });
        }
        let mut out = vec![0.0; outer * inner];
        let mut winners = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let at = (o * len + l) * inner + i;
                    if a.data()[at] > a.data()[best] {
                        best = at;
                    }
                }
                out[o * inner + i] = a.data()[best];
                winners[o * inner + i] = best;
            }
        }
        let out = Array::new(reduced_shape(a.shape(), axis), out)?;
        self.tape.push("max_axis", out, Op::MaxAxis(self.id, winners))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (outer, len, inner) = axis_layout(a.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let mut out = vec![0.0; a.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| a.data()[at(l)]).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (a.data()[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let out = Array::new(a.shape().to_vec(), out)?;
        self.tape.push("softmax", out, Op::Softmax(self.id, axis))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat_cols" })?;
        let tape = first.tape;
        let values: Vec<Rc<Array>> = parts.iter().map(Var::value).collect();
        let n = values[0].rows();
        for v in &values {
            require_matrix("concat_cols", v)?;
            if v.rows() != n {
                return Err(mismatch("concat_cols", &values[0], v));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let out = Array::new(vec![n, total], out)?;
        tape.push("concat_cols", out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Row-wise concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyAxis { op: "concat_rows" })?;
        let tape = first.tape;
        let values: Vec<Rc<Array>> = parts.iter().map(Var::value).collect();
        let c = values[0].cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &values {
            require_matrix("concat_rows", v)?;
            if v.cols() != c {
                return Err(mismatch("concat_rows", &values[0], v));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let out = Array::new(vec![rows, c], out)?;
        tape.push("concat_rows", out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (n, c) = require_matrix("slice_cols", &a)?;
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange { index: end, len: c });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&a.row(r)[start..end]);
        }
        self.tape.push(
            "slice_cols",
            Array::new(vec![n, w], out)?,
            Op::SliceCols(self.id, start),
        )
    }

    /// Repeats a `[C]` or `[1, C]` row into an `n × C` matrix.
    pub fn broadcast_rows(&self, n: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let c = match a.shape() {
            [c] => *c,
            [1, c] => *c,
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "broadcast_rows",
                    expected: 1,
                    got: a.shape().to_vec(),
                })
            }
        };
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(a.data());
        }
        self.tape.push(
            "broadcast_rows",
            Array::new(vec![n, c], out)?,
            Op::BroadcastRows(self.id),
        )
    }

    /// `out[r] = self[idx[r]]`. The adjoint scatter-adds in `idx` order.
    pub fn gather_rows(&self, idx: Arc<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (n, c) = require_matrix("gather_rows", &a)?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= n {
                return Err(TensorError::IndexOutOfRange { index: i, len: n });
            }
            out.extend_from_slice(a.row(i));
        }
        self.tape.push(
            "gather_rows",
            Array::new(vec![idx.len(), c], out)?,
            Op::GatherRows(self.id, idx),
        )
    }

    /// `out[idx[r]] += self[r]` into `m` rows, summed in row order.
    pub fn scatter_add_rows(&self, idx: Arc<Vec<usize>>, m: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (n, c) = require_matrix("scatter_add_rows", &a)?;
        if idx.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add_rows",
                lhs: a.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut out = vec![0.0; m * c];
        for (r, &dst) in idx.iter().enumerate() {
            if dst >= m {
                return Err(TensorError::IndexOutOfRange { index: dst, len: m });
            }
            for (o, &v) in out[dst * c..(dst + 1) * c].iter_mut().zip(a.row(r)) {
                *o += v;
            }
        }
        self.tape.push(
            "scatter_add_rows",
            Array::new(vec![m, c], out)?,
            Op::ScatterAddRows(self.id, idx),
        )
    }

    fn check_segments(&self, op: &'static str, seg: &Segments) -> Result<(usize, usize), TensorError> {
        let a = self.value();
        let (n, c) = require_matrix(op, &a)?;
        if seg.source_len() != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: vec![seg.source_len()],
            });
        }
        Ok((n, c))
    }

    /// Per-group reduction of rows, walking members in segment order.
    pub fn segment_reduce(&self, seg: Arc<Segments>, reduce: Reduce) -> Result<Var<'t>, TensorError> {
        let (_, c) = self.check_segments("segment_reduce", &seg)?;
        let a = self.value();
        let m = seg.num_groups();
        if reduce != Reduce::Sum && seg.has_empty_group() {
            return Err(TensorError::EmptyAxis { op: "segment_reduce" });
        }
        let mut out = vec![0.0; m * c];
        match reduce {
            Reduce::Sum | Reduce::Mean => {
                for (g, members) in seg.groups().enumerate() {
                    let orow = &mut out[g * c..(g + 1) * c];
                    for &i in members {
                        for (o, &v) in orow.iter_mut().zip(a.row(i)) {
                            *o += v;
                        }
                    }
                    if reduce == Reduce::Mean {
                        let inv = members.len() as Real;
                        for o in orow.iter_mut() {
                            *o /= inv;
                        }
                    }
                }
                let out = Array::new(vec![m, c], out)?;
                let op = if reduce == Reduce::Sum {
                    Op::SegmentSum(self.id, seg)
                } else {
                    Op::SegmentMean(self.id, seg)
                };
                self.tape.push("segment_reduce", out, op)
            }
            Reduce::Max => {
                let mut winners = vec![0; m * c];
                for (g, members) in seg.groups().enumerate() {
                    for j in 0..c {
                        let mut best = members[0];
                        for &i in &members[1..] {
                            if a.get(i, j) > a.get(best, j) {
                                best = i;
                            }
                        }
                        out[g * c + j] = a.get(best, j);
                        winners[g * c + j] = best;
                    }
                }
                let out = Array::new(vec![m, c], out)?;
                self.tape.push("segment_reduce", out, Op::SegmentMax(self.id, winners))
            }
        }
    }

    pub fn segment_sum(&self, seg: Arc<Segments>) -> Result<Var<'t>, TensorError> {
        self.segment_reduce(seg, Reduce::Sum)
    }

    /// Copies group row `g` to every member of `g` (adjoint of `segment_sum`).
    pub fn expand(&self, seg: Arc<Segments>) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (m, c) = require_matrix("expand", &a)?;
        if seg.num_groups() != m {
            return Err(TensorError::ShapeMismatch {
                op: "expand",
                lhs: a.shape().to_vec(),
                rhs: vec![seg.num_groups()],
            });
        }
        let n = seg.source_len();
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend_from_slice(a.row(seg.group_of(i)));
        }
        self.tape
            .push("expand", Array::new(vec![n, c], out)?, Op::Expand(self.id, seg))
    }

    /// Softmax over the member rows of each group, independently per column.
    pub fn segment_softmax(&self, seg: Arc<Segments>) -> Result<Var<'t>, TensorError> {
        let (_, c) = self.check_segments("segment_softmax", &seg)?;
        let a = self.value();
        let mut out = vec![0.0; a.len()];
        for members in seg.groups() {
            for j in 0..c {
                let max = members.iter().map(|&i| a.get(i, j)).fold(Real::NEG_INFINITY, Real::max);
                let mut z = 0.0;
                for &i in members {
                    let e = (a.get(i, j) - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for &i in members {
                    out[i * c + j] /= z;
                }
            }
        }
        let out = Array::new(a.shape().to_vec(), out)?;
        self.tape.push("segment_softmax", out, Op::SegmentSoftmax(self.id, seg))
    }

    /// Repeats each column `times` times in place: `out[:, l*times + m] = self[:, l]`.
    pub fn repeat_cols(&self, times: usize) -> Result<Var<'t>, TensorError> {
        let a = self.value();
        let (n, k) = require_matrix("repeat_cols", &a)?;
        let mut out = Vec::with_capacity(n * k * times);
        for r in 0..n {
            for &v in a.row(r) {
                out.extend(std::iter::repeat(v).take(times));
            }
        }
        self.tape.push(
            "repeat_cols",
            Array::new(vec![n, k * times], out)?,
            Op::RepeatCols(self.id, times),
        )
    }

    /// Sum of absolute values.
    pub fn l1_norm(&self) -> Result<Var<'t>, TensorError> {
        self.abs()?.sum()
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> Result<Var<'t>, TensorError> {
        self.square()?.sum()?.sqrt()
    }
}
