//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node. Adjoints are themselves
//! built out of graph operations, so a gradient obtained with
//! `record = true` is an ordinary [`Var`] that can be differentiated again.
//! This is what makes gradients through a one-step parameter update
//! (fast weights) available.
//!
//! Every value is a 2-D array; scalars are `1 x 1`. Binary elementwise ops
//! accept equal shapes, a `1 x 1` scalar against anything, a `1 x m` row
//! against `n x m`, and an `n x 1` column against `n x m`.

mod ops;

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array2;

pub use ops::{primitive_kernels, Op};

use crate::error::{Error, Result};

/// Dense row-major matrix used for every node value.
pub type Mat = Array2<f64>;

/// Numerical floor used inside logarithms and normalization denominators.
pub const EPS: f64 = 1e-12;

/// Sentinel in a gather map meaning "emit zero".
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// A recorded computation. Node ids are assigned in creation order, which is
/// also a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var({:?}, {}x{})", self.id, r, c)
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
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_elem((1, 1), value))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(Mat::zeros((rows, cols)))
    }

    fn leaf(&self, value: Mat, requires_grad: bool) -> Var<'_> {
        let id = self.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        NodeId(nodes.len() - 1)
    }

    fn value_of(&self, id: NodeId) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    /// Record `op` applied to `parents`. Shapes must already be validated.
    pub(crate) fn apply(&self, op: Op, parents: &[Var<'_>]) -> Var<'_> {
        let ids: Vec<NodeId> = parents.iter().map(|p| p.id).collect();
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs: Vec<&Mat> = ids.iter().map(|id| nodes[id.0].value.as_ref()).collect();
            let value = op.forward(&inputs);
            let requires_grad = !op.is_nondifferentiable() && ids.iter().any(|id| nodes[id.0].requires_grad);
            (value, requires_grad)
        };
        let id = self.push(Node {
            value: Rc::new(value),
            op,
            parents: ids,
            requires_grad,
        });
        Var { graph: self, id }
    }

    fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }
}

/// Gradients of a scalar target with respect to a list of parameters.
#[derive(Debug)]
pub struct GradientRecord<'g> {
    pub target: Var<'g>,
    pub with_respect_to: Vec<Var<'g>>,
    pub gradients: Vec<Var<'g>>,
    /// Whether `gradients` are live graph expressions (differentiable again).
    pub recorded: bool,
}

/// Reverse-mode gradients of `target` with respect to `params`.
///
/// With `record = false` the intermediate adjoint nodes are discarded and the
/// gradients come back as detached constants; with `record = true` they stay
/// in the graph and can be differentiated again.
pub fn backward<'g>(target: Var<'g>, params: &[Var<'g>], record: bool) -> Result<GradientRecord<'g>> {
    let graph = target.graph;
    if target.shape() != (1, 1) {
        return Err(Error::Contract(format!(
            "backward target must be a 1x1 scalar, got {:?}",
            target.shape()
        )));
    }
    if params.iter().any(|p| !std::ptr::eq(p.graph, graph)) {
        return Err(Error::Contract("parameter belongs to a different graph".into()));
    }
    let mark = graph.len();
    let t = target.id.0;
    let wanted: HashSet<usize> = params.iter().map(|p| p.id.0).collect();

    // Nodes through which some parameter influences the target.
    let relevant: Vec<bool> = {
        let nodes = graph.nodes.borrow();
        let mut rel = vec![false; t + 1];
        for id in 0..=t {
            let node = &nodes[id];
            rel[id] = wanted.contains(&id) || (node.requires_grad && node.parents.iter().any(|p| rel[p.0]));
        }
        rel
    };

    let mut adjoint: Vec<Option<Var<'g>>> = vec![None; t + 1];
    adjoint[t] = Some(graph.scalar(1.0));

    for id in (0..=t).rev() {
        if !relevant[id] {
            continue;
        }
        let Some(upstream) = adjoint[id] else { continue };
        let (op, parents) = {
            let nodes = graph.nodes.borrow();
            (nodes[id].op.clone(), nodes[id].parents.clone())
        };
        if parents.is_empty() {
            continue;
        }
        let wants: Vec<bool> = parents.iter().map(|p| relevant[p.0]).collect();
        if !wants.iter().any(|w| *w) {
            continue;
        }
        let node = Var { graph, id: NodeId(id) };
        let parent_vars: Vec<Var<'g>> = parents.iter().map(|&p| Var { graph, id: p }).collect();
        let grads = op.vjp(node, &parent_vars, upstream, &wants)?;
        for ((pid, want), g) in parents.iter().zip(&wants).zip(grads) {
            if !want {
                continue;
            }
            let Some(g) = g else { continue };
            adjoint[pid.0] = Some(match adjoint[pid.0] {
                None => g,
                Some(prev) => prev.add(g)?,
            });
        }
    }

    let mut gradients = Vec::with_capacity(params.len());
    let mut values = Vec::new();
    for p in params {
        let g = adjoint.get(p.id.0).copied().flatten();
        match g {
            Some(g) if record => gradients.push(g),
            Some(g) => values.push(Some(g.value())),
            None => {
                log::info!("parameter {:?} does not influence the target; gradient is zero", p.id);
                let (r, c) = p.shape();
                if record {
                    gradients.push(graph.zeros(r, c));
                } else {
                    values.push(None);
                }
            }
        }
    }
    if !record {
        graph.truncate(mark);
        for (p, v) in params.iter().zip(values) {
            let (r, c) = p.shape();
            gradients.push(match v {
                Some(v) => graph.constant((*v).clone()),
                None => graph.zeros(r, c),
            });
        }
    }
    Ok(GradientRecord {
        target,
        with_respect_to: params.to_vec(),
        gradients,
        recorded: record,
    })
}

/// `param - lr * gradient` as a graph expression.
///
/// If `gradient` was recorded, the result stays differentiable with respect
/// to everything the gradient depends on.
pub fn sgd_expression<'g>(param: Var<'g>, gradient: Var<'g>, lr: f64) -> Result<Var<'g>> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if param.shape() != gradient.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgd_expression",
            left: param.shape(),
            right: gradient.shape(),
        });
    }
    param.sub(gradient.scale(lr))
}

/// Stack matrices with equal column counts vertically.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_rows needs at least one input"))?;
    let cols = first.shape().1;
    for p in parts {
        if p.shape().1 != cols {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: first.shape(),
                right: p.shape(),
            });
        }
    }
    if parts.len() == 1 {
        return Ok(*first);
    }
    Ok(first.graph.apply(Op::ConcatRows, parts))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> Rc<Mat> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.graph.nodes.borrow()[self.id.0].value.dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id.0].requires_grad
    }

    pub fn op(&self) -> Op {
        self.graph.nodes.borrow()[self.id.0].op.clone()
    }

    pub fn parents(&self) -> Vec<Var<'g>> {
        let nodes = self.graph.nodes.borrow();
        nodes[self.id.0].parents.iter().map(|&id| Var { graph: self.graph, id }).collect()
    }

    /// Value of a `1 x 1` node. Panics on other shapes.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar {:?}", v.dim());
        v[[0, 0]]
    }

    /// A constant copy of this node's value, cut off from the graph.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(self, op: Op) -> Var<'g> {
        self.graph.apply(op, &[self])
    }

    /// Bring `self` and `other` to a common shape, inserting broadcast nodes.
    fn align(self, other: Var<'g>, op: &'static str) -> Result<(Var<'g>, Var<'g>)> {
        let (a, b) = (self.shape(), other.shape());
        if a == b {
            return Ok((self, other));
        }
        let widen = |x: Var<'g>, from: (usize, usize), to: (usize, usize)| -> Option<Var<'g>> {
            if from == (1, 1) {
                Some(x.unary(Op::BroadcastScalar { rows: to.0, cols: to.1 }))
            } else if from.0 == 1 && from.1 == to.1 {
                Some(x.unary(Op::BroadcastRows { rows: to.0 }))
            } else if from.1 == 1 && from.0 == to.0 {
                Some(x.unary(Op::BroadcastCols { cols: to.1 }))
            } else {
                None
            }
        };
        if let Some(x) = widen(self, a, b) {
            return Ok((x, other));
        }
        if let Some(y) = widen(other, b, a) {
            return Ok((self, y));
        }
        Err(Error::ShapeMismatch { op, left: a, right: b })
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.align(other, "add")?;
        Ok(self.graph.apply(Op::Add, &[a, b]))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.align(other, "sub")?;
        Ok(self.graph.apply(Op::Sub, &[a, b]))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.align(other, "mul")?;
        Ok(self.graph.apply(Op::Mul, &[a, b]))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.shape(), other.shape());
        if a.1 != b.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a,
                right: b,
            });
        }
        Ok(self.graph.apply(Op::MatMul, &[self, other]))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(c))
    }

    pub fn shift(self, c: f64) -> Var<'g> {
        self.unary(Op::Shift(c))
    }

    pub fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(Op::Exp)
    }

    /// Natural log with the argument floored at [`EPS`].
    pub fn ln(self) -> Var<'g> {
        self.unary(Op::Log)
    }

    pub fn tanh(self) -> Var<'g> {
        self.unary(Op::Tanh)
    }

    pub fn relu(self) -> Var<'g> {
        self.unary(Op::Relu)
    }

    /// `[x]+ = max(x, 0)`; subgradient at exactly zero is zero.
    pub fn clamp_at_zero(self) -> Var<'g> {
        self.relu()
    }

    /// Heaviside step (`1` where `x > 0`). Carries no gradient.
    pub fn step(self) -> Var<'g> {
        self.unary(Op::Step)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(Op::Square)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.unary(Op::Sqrt)
    }

    pub fn recip(self) -> Var<'g> {
        self.unary(Op::Recip)
    }

    pub fn sum(self) -> Var<'g> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Var<'g> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c).max(1) as f64)
    }

    /// Column sums, `n x m -> 1 x m`.
    pub fn sum_rows(self) -> Var<'g> {
        self.unary(Op::SumRows)
    }

    /// Row sums, `n x m -> n x 1`.
    pub fn sum_cols(self) -> Var<'g> {
        self.unary(Op::SumCols)
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Result<Var<'g>> {
        self.expect_shape((1, 1), "broadcast_scalar")?;
        Ok(self.unary(Op::BroadcastScalar { rows, cols }))
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'g>> {
        if self.shape().0 != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                left: self.shape(),
                right: (1, self.shape().1),
            });
        }
        Ok(self.unary(Op::BroadcastRows { rows }))
    }

    pub fn broadcast_cols(self, cols: usize) -> Result<Var<'g>> {
        if self.shape().1 != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                left: self.shape(),
                right: (self.shape().0, 1),
            });
        }
        Ok(self.unary(Op::BroadcastCols { cols }))
    }

    pub fn t(self) -> Var<'g> {
        self.unary(Op::Transpose)
    }

    /// Normalize each row to unit L2 norm: `x / sqrt(|x|^2 + EPS)`.
    pub fn l2_normalize_rows(self) -> Var<'g> {
        self.unary(Op::L2NormalizeRows)
    }

    pub fn max(self) -> Var<'g> {
        self.unary(Op::Max)
    }

    pub fn min(self) -> Var<'g> {
        self.unary(Op::Min)
    }

    /// Output `out.flat[k] = self.flat[map[k]]` (or zero for [`GATHER_ZERO`]).
    pub fn gather(self, map: Arc<[usize]>, rows: usize, cols: usize) -> Result<Var<'g>> {
        if map.len() != rows * cols {
            return Err(Error::invalid(format!(
                "gather map has {} entries for a {rows}x{cols} output",
                map.len()
            )));
        }
        let (r, c) = self.shape();
        if let Some(bad) = map.iter().find(|&&i| i != GATHER_ZERO && i >= r * c) {
            return Err(Error::invalid(format!("gather index {bad} out of range for {r}x{c}")));
        }
        Ok(self.unary(Op::Gather { map, rows, cols }))
    }

    /// Adjoint of [`Var::gather`]: `out.flat[map[k]] += self.flat[k]`.
    pub fn scatter_add(self, map: Arc<[usize]>, rows: usize, cols: usize) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        if map.len() != r * c {
            return Err(Error::invalid(format!("scatter map has {} entries for a {r}x{c} input", map.len())));
        }
        if let Some(bad) = map.iter().find(|&&i| i != GATHER_ZERO && i >= rows * cols) {
            return Err(Error::invalid(format!("scatter index {bad} out of range for {rows}x{cols}")));
        }
        Ok(self.unary(Op::ScatterAdd { map, rows, cols }))
    }

    /// Flatten to a `1 x (r*c)` row (row-major).
    pub fn flatten(self) -> Result<Var<'g>> {
        let (r, c) = self.shape();
        if r == 1 {
            return Ok(self);
        }
        let map: Arc<[usize]> = (0..r * c).collect();
        self.gather(map, 1, r * c)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        let (r, _) = self.shape();
        if start + len > r {
            return Err(Error::invalid(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        if start == 0 && len == r {
            return Ok(self);
        }
        Ok(self.unary(Op::SliceRows { start, len }))
    }

    fn expect_shape(&self, want: (usize, usize), op: &'static str) -> Result<()> {
        if self.shape() != want {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: want,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clamp_at_zero_of_negative_is_zero() {
        let g = Graph::new();
        let x = g.constant(array![[-0.2]]);
        assert_eq!(x.clamp_at_zero().item(), 0.0);
    }

    #[test]
    fn l2_normalize_three_four() {
        let g = Graph::new();
        let x = g.constant(array![[3.0, 4.0]]);
        let y = x.l2_normalize_rows().value();
        assert!((y[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((y[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn exp_adjoint_at_zero() {
        let g = Graph::new();
        let x = g.param(array![[0.0]]);
        let rec = backward(x.exp(), &[x], false).unwrap();
        assert_eq!(rec.gradients[0].item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.param(array![[3.0]]);
        let y = x.mul(x).unwrap();
        let rec = backward(y, &[x], false).unwrap();
        assert_eq!(rec.gradients[0].item(), 6.0);
    }

    #[test]
    fn cube_second_derivative() {
        let g = Graph::new();
        let x = g.param(array![[2.0]]);
        let y = x.mul(x).unwrap().mul(x).unwrap();
        let first = backward(y, &[x], true).unwrap();
        assert!(first.recorded);
        assert_eq!(first.gradients[0].item(), 12.0);
        let second = backward(first.gradients[0], &[x], false).unwrap();
        assert_eq!(second.gradients[0].item(), 12.0);
    }

    #[test]
    fn non_scalar_target_is_rejected() {
        let g = Graph::new();
        let x = g.param(array![[1.0, 2.0]]);
        assert!(matches!(backward(x, &[x], false), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.param(array![[1.0]]);
        let y = g.param(array![[1.0, 2.0]]);
        let rec = backward(x.square(), &[x, y], false).unwrap();
        assert_eq!(*rec.gradients[1].value(), Mat::zeros((1, 2)));
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let g = Graph::new();
        let a = g.constant(Mat::zeros((2, 3)));
        let b = g.constant(Mat::zeros((2, 3)));
        match a.matmul(b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let c = g.constant(Mat::zeros((3, 2)));
        assert!(a.add(c).is_err());
    }

    #[test]
    fn unrecorded_backward_leaves_graph_values_untouched() {
        let g = Graph::new();
        let x = g.param(array![[0.3, -1.2], [2.0, 0.5]]);
        let w = g.param(array![[1.0], [-0.5]]);
        let y = x.matmul(w).unwrap().tanh().sum();
        let before: Vec<Mat> = (0..g.len()).map(|i| (*g.value_of(NodeId(i))).clone()).collect();
        let n = g.len();
        backward(y, &[x, w], false).unwrap();
        for (i, v) in before.iter().enumerate() {
            assert_eq!(*g.value_of(NodeId(i)), *v);
        }
        // Only the two detached gradient constants were appended.
        assert_eq!(g.len(), n + 2);
    }

    #[test]
    fn sgd_expression_arithmetic() {
        let g = Graph::new();
        let p = g.param(array![[1.0]]);
        let grad = g.constant(array![[0.5]]);
        assert!((sgd_expression(p, grad, 0.1).unwrap().item() - 0.95).abs() < 1e-15);
        assert!(sgd_expression(p, grad, -0.1).is_err());
    }

    #[test]
    fn fast_weight_of_half_square_has_slope_one_minus_lr() {
        let g = Graph::new();
        let theta = g.param(array![[1.7]]);
        let loss = theta.square().scale(0.5);
        let rec = backward(loss, &[theta], true).unwrap();
        let lr = 0.3;
        let fast = sgd_expression(theta, rec.gradients[0], lr).unwrap();
        let d = backward(fast, &[theta], false).unwrap();
        assert!((d.gradients[0].item() - (1.0 - lr)).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_row_bias() {
        let g = Graph::new();
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.param(array![[10.0, 20.0]]);
        let y = x.add(b).unwrap();
        assert_eq!(*y.value(), array![[11.0, 22.0], [13.0, 24.0]]);
        let rec = backward(y.sum(), &[b], false).unwrap();
        assert_eq!(*rec.gradients[0].value(), array![[2.0, 2.0]]);
    }

    #[test]
    fn deterministic_replay() {
        let build = || {
            let g = Graph::new();
            let x = g.param(array![[0.1, 0.7, -0.3]]);
            let y = x.l2_normalize_rows().exp().ln().tanh().sum();
            let rec = backward(y, &[x], false).unwrap();
            (
                y.item().to_bits(),
                rec.gradients[0].value().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(build(), build());
    }
}
