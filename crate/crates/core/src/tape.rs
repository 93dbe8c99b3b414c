//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the ids of
//! its inputs. Nodes can only reference earlier nodes, so the node vector
//! is already in topological order and [`Tape::backward`] is a single
//! reverse sweep. Backward never mutates the tape; calling it twice on the
//! same root gives identical gradients.
//!
//! Broadcasting is limited to the forms the model needs: a row added to
//! every row of a matrix, a column scaling every row, and a `1 x 1`
//! scalar multiplying a whole tensor.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier of a node on a tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    DivCol(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxLast(NodeId),
    ConcatLast(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    RepeatRows(NodeId, usize),
    SegmentSumRows(NodeId, usize),
    SumLast(NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SqEuclid(NodeId, NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the root.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
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

    /// A differentiable input (a parameter or anything else we want gradients for).
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        value.check_finite("leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// A constant input; gradients are never propagated into it.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        value.check_finite("constant")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<Var<'_>> {
        value.check_finite(name)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward root belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: NodeId| &nodes[id].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, g.zip_map(val(*b), |g, b| g * b));
            accumulate(nodes, grads, *b, g.zip_map(val(*a), |g, a| g * a));
        }
        Op::Div(a, b) => {
            let bv = val(*b);
            accumulate(nodes, grads, *a, g.zip_map(bv, |g, b| g / b));
            let ga = g.zip_map(y, |g, y| g * y);
            accumulate(nodes, grads, *b, ga.zip_map(bv, |gy, b| -gy / b));
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *r, g.sum_rows());
        }
        Op::MulCol(a, c) => {
            let (av, cv) = (val(*a), val(*c));
            let cols = g.cols();
            let mut ga = g.clone();
            let mut gc = vec![0.0; cv.numel()];
            for (i, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                let ci = cv.data()[i];
                let arow = av.row_slice(i);
                let mut acc = 0.0;
                for (gv, a) in row.iter_mut().zip(arow) {
                    acc += *gv * a;
                    *gv *= ci;
                }
                gc[i] = acc;
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *c, Tensor::from_parts(cv.shape().to_vec(), gc));
        }
        Op::DivCol(a, c) => {
            let cv = val(*c);
            let cols = g.cols();
            let mut ga = g.clone();
            let mut gc = vec![0.0; cv.numel()];
            for (i, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                let ci = cv.data()[i];
                let yrow = y.row_slice(i);
                let mut acc = 0.0;
                for (gv, yv) in row.iter_mut().zip(yrow) {
                    acc -= *gv * yv / ci;
                    *gv /= ci;
                }
                gc[i] = acc;
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *c, Tensor::from_parts(cv.shape().to_vec(), gc));
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).item();
            accumulate(nodes, grads, *a, g.map(|v| v * sv));
            let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(g, a)| g * a).sum();
            accumulate(nodes, grads, *s, Tensor::from_parts(vec![1, 1], vec![gs]));
        }
        Op::Scale(a, f) => accumulate(nodes, grads, *a, g.map(|v| v * f)),
        Op::AddConst(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.gemm(false, val(*b), true));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, val(*a).gemm(true, g, false));
            }
        }
        Op::MatMulNT(a, b) => {
            if nodes[*a].requires_grad {
                accumulate(nodes, grads, *a, g.gemm(false, val(*b), false));
            }
            if nodes[*b].requires_grad {
                accumulate(nodes, grads, *b, g.gemm(true, val(*a), false));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
        Op::Tanh(a) => accumulate(nodes, grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(y, |g, y| g * y)),
        Op::Log(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::Square(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| 2.0 * g * x)),
        Op::Clamp(a, lo, hi) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { 0.0 }),
        ),
        Op::SoftmaxLast(a) => {
            let cols = y.cols();
            let mut gx = g.clone();
            for (i, row) in gx.data_mut().chunks_mut(cols).enumerate() {
                let yrow = y.row_slice(i);
                let dot: f64 = row.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for (gv, yv) in row.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            accumulate(nodes, grads, *a, gx);
        }
        Op::ConcatLast(parts) => {
            let rows = g.rows();
            let mut offset = 0;
            for &p in parts {
                let pc = val(p).cols();
                if nodes[p].requires_grad {
                    let mut out = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        out.extend_from_slice(&g.row_slice(r)[offset..offset + pc]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_parts(val(p).shape().to_vec(), out));
                }
                offset += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let cols = g.cols();
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                if nodes[p].requires_grad {
                    let piece = g.data()[offset..offset + n].to_vec();
                    accumulate(nodes, grads, p, Tensor::from_parts(val(p).shape().to_vec(), piece));
                }
                offset += n;
                debug_assert_eq!(n % cols.max(1), 0);
            }
        }
        Op::GatherRows(a, idx) => {
            let av = val(*a);
            let cols = av.cols();
            let mut ga = Tensor::zeros(av.shape());
            for (k, &i) in idx.iter().enumerate() {
                let src = g.row_slice(k);
                for (d, s) in ga.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                    *d += s;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::RepeatRows(a, times) => accumulate(nodes, grads, *a, g.segment_sum_rows(*times)),
        Op::SegmentSumRows(a, seg) => accumulate(nodes, grads, *a, g.repeat_rows(*seg)),
        Op::SumLast(a) => {
            let av = val(*a);
            let cols = av.cols();
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
        }
        Op::SumRows(a) => {
            let av = val(*a);
            let data = (0..av.rows()).flat_map(|_| g.data().iter().copied()).collect();
            accumulate(nodes, grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
        }
        Op::Sum(a) => {
            let gv = g.item();
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), gv));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let gv = g.item() / av.numel() as f64;
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), gv));
        }
        Op::SqEuclid(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                // dA = 2 (diag(rowsum g) A - g B)
                let rs = g.sum_last();
                let gb = g.gemm(false, bv, false);
                let mut ga = av.clone();
                let cols = ga.cols();
                for (i, row) in ga.data_mut().chunks_mut(cols).enumerate() {
                    let s = rs.data()[i];
                    for (v, w) in row.iter_mut().zip(gb.row_slice(i)) {
                        *v = 2.0 * (s * *v - w);
                    }
                }
                accumulate(nodes, grads, *a, ga);
            }
            if nodes[*b].requires_grad {
                let cs = g.sum_rows();
                let gta = g.gemm(true, av, false);
                let mut gbm = bv.clone();
                let cols = gbm.cols();
                for (j, row) in gbm.data_mut().chunks_mut(cols).enumerate() {
                    let s = cs.data()[j];
                    for (v, w) in row.iter_mut().zip(gta.row_slice(j)) {
                        *v = 2.0 * (s * *v - w);
                    }
                }
                accumulate(nodes, grads, *b, gbm);
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.reshaped(val(*a).shape())),
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    /// Owned copy of the current value.
    pub fn tensor(&self) -> Tensor {
        self.value().clone()
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

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }

    fn unary(&self, name: &str, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Result<Var<'t>> {
        let out = f(&self.value());
        self.tape.record(name, out, op, &[self.id])
    }

    fn elementwise(
        &self,
        name: &str,
        other: &Var<'t>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(shape_err(name, a.shape(), b.shape()));
            }
            a.zip_map(&b, f)
        };
        self.tape.record(name, out, op, &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise("add", other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise("sub", other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise("mul", other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.elementwise("div", other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let out = {
            let (a, r) = (self.value(), row.value());
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(shape_err("add_row", a.shape(), r.shape()));
            }
            let mut out = a.clone();
            let c = a.cols();
            for chunk in out.data_mut().chunks_mut(c) {
                for (v, b) in chunk.iter_mut().zip(r.data()) {
                    *v += b;
                }
            }
            out
        };
        self.tape
            .record("add_row", out, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    fn col_broadcast(
        &self,
        name: &str,
        col: &Var<'t>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(col)?;
        let out = {
            let (a, c) = (self.value(), col.value());
            if c.numel() != a.rows() || c.cols() != 1 {
                return Err(shape_err(name, a.shape(), c.shape()));
            }
            let mut out = a.clone();
            let cols = a.cols();
            for (chunk, &s) in out.data_mut().chunks_mut(cols).zip(c.data()) {
                for v in chunk.iter_mut() {
                    *v = f(*v, s);
                }
            }
            out
        };
        self.tape.record(name, out, op, &[self.id, col.id])
    }

    /// Scales row `i` by `col[i]`; `col` is `rows x 1`.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast("mul_col", col, Op::MulCol(self.id, col.id), |a, c| a * c)
    }

    /// Divides row `i` by `col[i]`; `col` is `rows x 1`.
    pub fn div_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        self.col_broadcast("div_col", col, Op::DivCol(self.id, col.id), |a, c| a / c)
    }

    /// Multiplies every element by a `1 x 1` variable.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s)?;
        let out = {
            let sv = s.value();
            if sv.numel() != 1 {
                return Err(shape_err("mul_scalar", &self.shape(), sv.shape()));
            }
            let k = sv.item();
            self.value().map(|v| v * k)
        };
        self.tape
            .record("mul_scalar", out, Op::MulScalar(self.id, s.id), &[self.id, s.id])
    }

    pub fn scale(&self, f: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, f), |a| a.map(|v| v * f))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", Op::AddConst(self.id), |a| a.map(|v| v + c))
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Result<Var<'t>> {
        self.neg()?.add_scalar(1.0)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() > 2 || b.shape().len() > 2 || a.cols() != b.rows() {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            a.gemm(false, &b, false)
        };
        self.tape
            .record("matmul", out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape().len() > 2 || b.shape().len() > 2 || a.cols() != b.cols() {
                return Err(shape_err("matmul_nt", a.shape(), b.shape()));
            }
            a.gemm(false, &b, true)
        };
        self.tape.record(
            "matmul_nt",
            out,
            Op::MatMulNT(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        self.unary("transpose", Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |a| a.map(f64::exp))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), |a| a.map(f64::ln))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |a| a.map(|v| v * v))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary("clamp", Op::Clamp(self.id, lo, hi), |a| a.map(|v| v.clamp(lo, hi)))
    }

    pub fn softmax_last(&self) -> Result<Var<'t>> {
        self.unary("softmax", Op::SoftmaxLast(self.id), Tensor::softmax_last)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), |a| Tensor::from_parts(vec![1, 1], vec![a.sum()]))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.unary("mean", Op::Mean(self.id), |a| {
            Tensor::from_parts(vec![1, 1], vec![a.sum() / a.numel() as f64])
        })
    }

    /// Sum over the last dimension (`rows x 1`).
    pub fn sum_last(&self) -> Result<Var<'t>> {
        self.unary("sum_last", Op::SumLast(self.id), Tensor::sum_last)
    }

    /// Sum over rows (`1 x cols`).
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        self.unary("sum_rows", Op::SumRows(self.id), Tensor::sum_rows)
    }

    /// Pairwise squared distances between rows of `self` and rows of `other`.
    pub fn sq_euclid(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.cols() != b.cols() {
                return Err(shape_err("sq_euclid", a.shape(), b.shape()));
            }
            a.sq_euclid(&b)
        };
        self.tape
            .record("sq_euclid", out, Op::SqEuclid(self.id, other.id), &[self.id, other.id])
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let rows = self.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        self.unary("gather_rows", Op::GatherRows(self.id, idx.to_vec()), |a| {
            a.gather_rows(idx)
        })
    }

    pub fn repeat_rows(&self, times: usize) -> Result<Var<'t>> {
        if times == 0 {
            return Err(Error::contract("repeat_rows: zero repetitions"));
        }
        self.unary("repeat_rows", Op::RepeatRows(self.id, times), |a| {
            a.repeat_rows(times)
        })
    }

    /// Sums consecutive blocks of `seg` rows.
    pub fn segment_sum_rows(&self, seg: usize) -> Result<Var<'t>> {
        if seg == 0 || self.rows() % seg != 0 {
            return Err(Error::contract(format!(
                "segment_sum_rows: {} rows not divisible into blocks of {seg}",
                self.rows()
            )));
        }
        self.unary("segment_sum_rows", Op::SegmentSumRows(self.id, seg), |a| {
            a.segment_sum_rows(seg)
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let numel: usize = shape.iter().product();
        if numel != self.value().numel() {
            return Err(shape_err("reshape", &self.shape(), shape));
        }
        self.unary("reshape", Op::Reshape(self.id), |a| a.reshaped(shape))
    }
}

/// Concatenates along the last dimension.
pub fn concat_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_last: no inputs"))?;
    for p in parts {
        first.same_tape(p)?;
    }
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        if let Some(v) = vals.iter().find(|v| v.rows() != rows || v.shape().len() > 2) {
            return Err(shape_err("concat_last", vals[0].shape(), v.shape()));
        }
        let refs: Vec<&Tensor> = vals.iter().map(|v| &**v).collect();
        Tensor::concat_last(&refs)
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    first
        .tape
        .record("concat_last", out, Op::ConcatLast(ids.clone()), &ids)
}

/// Stacks along rows.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_rows: no inputs"))?;
    for p in parts {
        first.same_tape(p)?;
    }
    let out = {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        if let Some(v) = vals.iter().find(|v| v.cols() != cols) {
            return Err(shape_err("concat_rows", vals[0].shape(), v.shape()));
        }
        let refs: Vec<&Tensor> = vals.iter().map(|v| &**v).collect();
        Tensor::concat_rows(&refs)
    };
    let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
    first
        .tape
        .record("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
