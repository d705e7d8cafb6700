//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during a
//! forward pass. [`Tape::backward`] then walks the list once in reverse,
//! accumulating adjoints into the requested leaves. A tape built with
//! [`Tape::inference`] evaluates the same ops but records no history.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Tanh(usize),
    Relu(usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    AddColConst(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    Square(usize),
    Sqrt(usize),
    FrobeniusNorm(usize),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    RepeatRows(usize, usize),
    TileRows(usize, usize),
    Reshape(usize),
    SliceCols(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for a later backward pass.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates. `backward` on it is an error.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, self.recording)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push_node(value, op, true)
        } else {
            self.push_node(value, Op::Leaf, false)
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from the scalar `loss` to each of `leaves`.
    ///
    /// Leaves that do not influence the loss get a zero adjoint.
    pub fn backward(&self, loss: Var<'_>, leaves: &[Var<'_>]) -> Result<GradientMap> {
        if !self.recording {
            return Err(Error::Tape("backward on an inference tape".into()));
        }
        self.check_owned(loss)?;
        for &leaf in leaves {
            self.check_owned(leaf)?;
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.shape() != [1, 1] {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }

        let mut adjoints: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        adjoints[loss.id] = Some(Tensor::scalar(1.0));
        let mut grads = HashMap::with_capacity(leaves.len());

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = adjoints[id].take() else {
                continue;
            };
            // an interior node may itself be requested
            if leaves.iter().any(|l| l.id == id) {
                grads.insert(NodeId(id), grad.clone());
            }
            propagate(&nodes, id, &grad, &mut adjoints);
        }

        for &leaf in leaves {
            if grads.contains_key(&NodeId(leaf.id)) {
                continue;
            }
            let shape = nodes[leaf.id].value.shape();
            let adj = adjoints
                .get_mut(leaf.id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]));
            grads.insert(NodeId(leaf.id), adj);
        }
        Ok(GradientMap { grads })
    }

    fn check_owned(&self, var: Var<'_>) -> Result<()> {
        if !std::ptr::eq(self, var.tape) || var.id >= self.len() {
            return Err(Error::Tape(format!(
                "node {} is not recorded on this tape",
                var.id
            )));
        }
        Ok(())
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut adjoints[id] {
        Some(acc) => acc.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let needs = |i: usize| nodes[i].requires_grad;
    match nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if needs(a) {
                accumulate(adj, nodes, a, g.zip_with(val(b), |g, y| g * y));
            }
            if needs(b) {
                accumulate(adj, nodes, b, g.zip_with(val(a), |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            if needs(a) {
                accumulate(adj, nodes, a, g.zip_with(val(b), |g, y| g / y));
            }
            if needs(b) {
                // d(a/b)/db = -(a/b)/b
                let t = g.zip_with(out, |g, q| g * q).zip_with(val(b), |gq, y| -gq / y);
                accumulate(adj, nodes, b, t);
            }
        }
        Op::MatMul(a, b) => {
            if needs(a) {
                accumulate(adj, nodes, a, gemm(g, false, val(b), true));
            }
            if needs(b) {
                accumulate(adj, nodes, b, gemm(val(a), true, g, false));
            }
        }
        Op::Transpose(a) => accumulate(adj, nodes, a, g.transpose()),
        Op::Exp(a) => accumulate(adj, nodes, a, g.zip_with(out, |g, y| g * y)),
        Op::Tanh(a) => accumulate(adj, nodes, a, g.zip_with(out, |g, y| g * (1.0 - y * y))),
        Op::Relu(a) => {
            // subgradient 0 at exactly 0
            let t = g.zip_with(val(a), |g, x| if x > 0.0 { g } else { 0.0 });
            accumulate(adj, nodes, a, t);
        }
        Op::Neg(a) => accumulate(adj, nodes, a, g.scale(-1.0)),
        Op::Scale(a, s) => accumulate(adj, nodes, a, g.scale(s)),
        Op::AddConst(a) | Op::AddColConst(a) => accumulate(adj, nodes, a, g.clone()),
        Op::SumAll(a) => {
            let [r, c] = val(a).shape();
            accumulate(adj, nodes, a, Tensor::full(r, c, g.item()));
        }
        Op::SumRows(a) => {
            let [r, c] = val(a).shape();
            let mut t = Tensor::zeros(r, c);
            for i in 0..r {
                let gi = g.get(i, 0);
                for j in 0..c {
                    t.set(i, j, gi);
                }
            }
            accumulate(adj, nodes, a, t);
        }
        Op::SumCols(a) => {
            let [r, c] = val(a).shape();
            let mut t = Tensor::zeros(r, c);
            for i in 0..r {
                t.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
            }
            accumulate(adj, nodes, a, t);
        }
        Op::BroadcastRow(a) => accumulate(adj, nodes, a, g.col_sums()),
        Op::BroadcastCol(a) => accumulate(adj, nodes, a, g.row_sums()),
        Op::Square(a) => accumulate(adj, nodes, a, g.zip_with(val(a), |g, x| 2.0 * g * x)),
        Op::Sqrt(a) => accumulate(adj, nodes, a, g.zip_with(out, |g, y| 0.5 * g / y)),
        Op::FrobeniusNorm(a) => {
            let norm = out.item();
            let scale = if norm > 0.0 { g.item() / norm } else { 0.0 };
            accumulate(adj, nodes, a, val(a).scale(scale));
        }
        Op::MulScalar(a, s) => {
            let sv = val(s).item();
            if needs(a) {
                accumulate(adj, nodes, a, g.scale(sv));
            }
            if needs(s) {
                let dot: f64 = g.data().iter().zip(val(a).data()).map(|(g, x)| g * x).sum();
                accumulate(adj, nodes, s, Tensor::scalar(dot));
            }
        }
        Op::DivScalar(a, s) => {
            let sv = val(s).item();
            if needs(a) {
                accumulate(adj, nodes, a, g.scale(1.0 / sv));
            }
            if needs(s) {
                let dot: f64 = g.data().iter().zip(val(a).data()).map(|(g, x)| g * x).sum();
                accumulate(adj, nodes, s, Tensor::scalar(-dot / (sv * sv)));
            }
        }
        Op::RepeatRows(a, times) => {
            let [r, c] = val(a).shape();
            let mut t = Tensor::zeros(r, c);
            for i in 0..r {
                let dst = &mut t.data_mut()[i * c..(i + 1) * c];
                for k in 0..times {
                    for (d, v) in dst.iter_mut().zip(g.row(i * times + k)) {
                        *d += v;
                    }
                }
            }
            accumulate(adj, nodes, a, t);
        }
        Op::TileRows(a, times) => {
            let [r, c] = val(a).shape();
            let mut t = Tensor::zeros(r, c);
            for k in 0..times {
                for i in 0..r {
                    let dst = &mut t.data_mut()[i * c..(i + 1) * c];
                    for (d, v) in dst.iter_mut().zip(g.row(k * r + i)) {
                        *d += v;
                    }
                }
            }
            accumulate(adj, nodes, a, t);
        }
        Op::Reshape(a) => {
            let [r, c] = val(a).shape();
            let t = Tensor::from_vec(r, c, g.data().to_vec()).expect("reshape preserves length");
            accumulate(adj, nodes, a, t);
        }
        Op::SliceCols(a, start) => {
            let [r, c] = val(a).shape();
            let width = g.cols();
            let mut t = Tensor::zeros(r, c);
            for i in 0..r {
                t.data_mut()[i * c + start..i * c + start + width].copy_from_slice(g.row(i));
            }
            accumulate(adj, nodes, a, t);
        }
    }
}

/// Adjoints of the leaves requested from [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&leaf.node_id())
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
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

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn require_scalar(op: &'static str, s: &Tensor) -> Result<()> {
    if s.shape() != [1, 1] {
        return Err(Error::ShapeMismatch {
            op,
            left: s.shape(),
            right: [1, 1],
        });
    }
    Ok(())
}

// Arithmetic is fallible (shape checks), so these are methods rather than std::ops impls.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node_id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.value().shape()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, &[self.id])
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, &[self.id, other.id])
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        Ok(self.binary(other, a.zip_with(&b, f), op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::domain("div", "zero denominator"));
        }
        self.elementwise(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let value = self.value().transpose();
        self.unary(value, Op::Transpose(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.unary(value, Op::Exp(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.value().map(f64::tanh);
        self.unary(value, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let value = self.value().map(|v| v.max(0.0));
        self.unary(value, Op::Relu(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        let value = self.value().scale(-1.0);
        self.unary(value, Op::Neg(self.id))
    }

    /// Multiplication by a fixed real.
    pub fn scale(self, s: f64) -> Var<'t> {
        let value = self.value().scale(s);
        self.unary(value, Op::Scale(self.id, s))
    }

    /// Adds a fixed real to every entry.
    pub fn add_const(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        self.unary(value, Op::AddConst(self.id))
    }

    /// Adds the fixed offset `offsets[i]` to every entry of row `i`.
    pub fn add_row_offsets(self, offsets: &[f64]) -> Result<Var<'t>> {
        let mut value = (*self.value()).clone();
        if offsets.len() != value.rows() {
            return Err(Error::ShapeMismatch {
                op: "add_row_offsets",
                left: value.shape(),
                right: [offsets.len(), 1],
            });
        }
        let cols = value.cols();
        for (row, off) in value.data_mut().chunks_mut(cols.max(1)).zip(offsets) {
            row.iter_mut().for_each(|v| *v += off);
        }
        Ok(self.unary(value, Op::AddColConst(self.id)))
    }

    pub fn sum_all(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::SumAll(self.id))
    }

    /// n×m → n×1 of per-row sums.
    pub fn sum_rows(self) -> Var<'t> {
        let value = self.value().row_sums();
        self.unary(value, Op::SumRows(self.id))
    }

    /// n×m → 1×m of per-column sums.
    pub fn sum_cols(self) -> Var<'t> {
        let value = self.value().col_sums();
        self.unary(value, Op::SumCols(self.id))
    }

    /// 1×m → n×m by repeating the row.
    pub fn broadcast_row(self, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_row",
                left: v.shape(),
                right: [1, v.cols()],
            });
        }
        let mut data = Vec::with_capacity(n * v.cols());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(n, v.cols(), data)?;
        Ok(self.unary(value, Op::BroadcastRow(self.id)))
    }

    /// n×1 → n×m by repeating the column.
    pub fn broadcast_col(self, m: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_col",
                left: v.shape(),
                right: [v.rows(), 1],
            });
        }
        let mut data = Vec::with_capacity(v.rows() * m);
        for &x in v.data() {
            data.extend(std::iter::repeat_n(x, m));
        }
        let value = Tensor::from_vec(v.rows(), m, data)?;
        Ok(self.unary(value, Op::BroadcastCol(self.id)))
    }

    pub fn square(self) -> Var<'t> {
        let value = self.value().map(|v| v * v);
        self.unary(value, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.data().iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt", "negative argument"));
        }
        let value = v.map(f64::sqrt);
        Ok(self.unary(value, Op::Sqrt(self.id)))
    }

    /// √Σx² as a 1×1 value.
    pub fn frobenius_norm(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().frobenius_norm());
        self.unary(value, Op::FrobeniusNorm(self.id))
    }

    /// Every entry times the 1×1 value `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        require_scalar("mul_scalar", &sv)?;
        let value = self.value().scale(sv.item());
        Ok(self.binary(s, value, Op::MulScalar(self.id, s.id)))
    }

    /// Every entry divided by the 1×1 value `s`.
    pub fn div_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        require_scalar("div_scalar", &sv)?;
        if sv.item() == 0.0 {
            return Err(Error::domain("div_scalar", "zero denominator"));
        }
        let inv = sv.item();
        let value = self.value().map(|v| v / inv);
        Ok(self.binary(s, value, Op::DivScalar(self.id, s.id)))
    }

    /// Row `i` of the result at `i * times + k` is row `i` of `self`.
    pub fn repeat_rows(self, times: usize) -> Var<'t> {
        let v = self.value();
        let mut data = Vec::with_capacity(v.len() * times);
        for r in 0..v.rows() {
            for _ in 0..times {
                data.extend_from_slice(v.row(r));
            }
        }
        let value = Tensor::from_vec(v.rows() * times, v.cols(), data).expect("sized");
        self.unary(value, Op::RepeatRows(self.id, times))
    }

    /// The whole matrix stacked `times` times vertically.
    pub fn tile_rows(self, times: usize) -> Var<'t> {
        let v = self.value();
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_vec(v.rows() * times, v.cols(), data).expect("sized");
        self.unary(value, Op::TileRows(self.id, times))
    }

    /// Row-major reinterpretation with the same number of entries.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value();
        if rows * cols != v.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: v.shape(),
                right: [rows, cols],
            });
        }
        let value = Tensor::from_vec(rows, cols, v.data().to_vec())?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if start > end || end > v.cols() {
            return Err(Error::InvalidArgument(format!(
                "column range {start}..{end} out of bounds for {:?}",
                v.shape()
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(v.rows() * width);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let value = Tensor::from_vec(v.rows(), width, data)?;
        Ok(self.unary(value, Op::SliceCols(self.id, start)))
    }

    /// Mean of all entries as a 1×1 value.
    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }
}
