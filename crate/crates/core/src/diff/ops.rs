use std::sync::Arc;

use ndarray::{concatenate, s, Axis};

use super::{concat_rows, Mat, Var, EPS, GATHER_ZERO};
use crate::error::Result;

/// Primitive operations. Each has a forward kernel and an adjoint written in
/// terms of other primitives, so adjoints can be differentiated again.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Shift(f64),
    Exp,
    Log,
    Tanh,
    Relu,
    Step,
    Square,
    Sqrt,
    Recip,
    Sum,
    SumRows,
    SumCols,
    BroadcastScalar { rows: usize, cols: usize },
    BroadcastRows { rows: usize },
    BroadcastCols { cols: usize },
    Transpose,
    L2NormalizeRows,
    Max,
    Min,
    Gather { map: Arc<[usize]>, rows: usize, cols: usize },
    ScatterAdd { map: Arc<[usize]>, rows: usize, cols: usize },
    ConcatRows,
    SliceRows { start: usize, len: usize },
}

const KERNELS: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "exp",
    "log",
    "tanh",
    "relu",
    "clamp_at_zero",
    "step",
    "square",
    "sqrt",
    "recip",
    "sum",
    "mean",
    "sum_rows",
    "sum_cols",
    "broadcast_scalar",
    "broadcast_rows",
    "broadcast_cols",
    "transpose",
    "l2_normalize_rows",
    "max",
    "min",
    "gather",
    "scatter_add",
    "concat_rows",
    "slice_rows",
];

/// Names of the supported differentiable kernels.
pub fn primitive_kernels() -> &'static [&'static str] {
    KERNELS
}

fn arg_extreme(a: &Mat, want_max: bool) -> usize {
    let mut best = 0;
    let mut best_v = f64::NAN;
    for (i, &v) in a.iter().enumerate() {
        let better = if want_max { v > best_v } else { v < best_v };
        if i == 0 || better {
            best = i;
            best_v = v;
        }
    }
    best
}

impl Op {
    pub(crate) fn is_nondifferentiable(&self) -> bool {
        matches!(self, Op::Step)
    }

    pub(crate) fn forward(&self, x: &[&Mat]) -> Mat {
        match self {
            Op::Leaf => unreachable!("leaves carry their own value"),
            Op::MatMul => x[0].dot(x[1]),
            Op::Add => x[0] + x[1],
            Op::Sub => x[0] - x[1],
            Op::Mul => x[0] * x[1],
            Op::Scale(c) => x[0] * *c,
            Op::Shift(c) => x[0] + *c,
            Op::Exp => x[0].mapv(f64::exp),
            Op::Log => x[0].mapv(|v| v.max(EPS).ln()),
            Op::Tanh => x[0].mapv(f64::tanh),
            Op::Relu => x[0].mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Op::Step => x[0].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::Square => x[0].mapv(|v| v * v),
            Op::Sqrt => x[0].mapv(f64::sqrt),
            Op::Recip => x[0].mapv(|v| 1.0 / v),
            Op::Sum => Mat::from_elem((1, 1), x[0].iter().sum()),
            Op::SumRows => x[0].sum_axis(Axis(0)).insert_axis(Axis(0)),
            Op::SumCols => x[0].sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::BroadcastScalar { rows, cols } => Mat::from_elem((*rows, *cols), x[0][[0, 0]]),
            Op::BroadcastRows { rows } => {
                let c = x[0].ncols();
                x[0].broadcast((*rows, c)).expect("row broadcast").to_owned()
            }
            Op::BroadcastCols { cols } => {
                let r = x[0].nrows();
                x[0].broadcast((r, *cols)).expect("column broadcast").to_owned()
            }
            Op::Transpose => x[0].t().as_standard_layout().into_owned(),
            Op::L2NormalizeRows => {
                let mut out = x[0].clone();
                for mut row in out.rows_mut() {
                    let norm = (row.iter().map(|v| v * v).sum::<f64>() + EPS).sqrt();
                    row.mapv_inplace(|v| v / norm);
                }
                out
            }
            Op::Max => Mat::from_elem((1, 1), x[0].iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            Op::Min => Mat::from_elem((1, 1), x[0].iter().copied().fold(f64::INFINITY, f64::min)),
            Op::Gather { map, rows, cols } => {
                let flat: Vec<f64> = x[0].iter().copied().collect();
                let data = map.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { flat[i] }).collect();
                Mat::from_shape_vec((*rows, *cols), data).expect("gather shape")
            }
            Op::ScatterAdd { map, rows, cols } => {
                let mut data = vec![0.0; rows * cols];
                for (&i, v) in map.iter().zip(x[0].iter()) {
                    if i != GATHER_ZERO {
                        data[i] += v;
                    }
                }
                Mat::from_shape_vec((*rows, *cols), data).expect("scatter shape")
            }
            Op::ConcatRows => {
                let views: Vec<_> = x.iter().map(|m| m.view()).collect();
                concatenate(Axis(0), &views).expect("concat rows")
            }
            Op::SliceRows { start, len } => x[0].slice(s![*start..*start + *len, ..]).to_owned(),
        }
    }

    /// Vector-Jacobian products for each parent, built as new graph nodes.
    pub(crate) fn vjp<'g>(&self, out: Var<'g>, p: &[Var<'g>], g: Var<'g>, wants: &[bool]) -> Result<Vec<Option<Var<'g>>>> {
        let want = |i: usize| wants.get(i).copied().unwrap_or(false);
        let one = |v: Var<'g>| Ok(vec![Some(v)]);
        match self {
            Op::Leaf | Op::Step => Ok(vec![None; p.len()]),
            Op::MatMul => {
                let ga = if want(0) { Some(g.matmul(p[1].t())?) } else { None };
                let gb = if want(1) { Some(p[0].t().matmul(g)?) } else { None };
                Ok(vec![ga, gb])
            }
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => Ok(vec![Some(g), if want(1) { Some(g.neg()) } else { None }]),
            Op::Mul => {
                let ga = if want(0) { Some(g.mul(p[1])?) } else { None };
                let gb = if want(1) { Some(g.mul(p[0])?) } else { None };
                Ok(vec![ga, gb])
            }
            Op::Scale(c) => one(g.scale(*c)),
            Op::Shift(_) => one(g),
            Op::Exp => one(g.mul(out)?),
            Op::Log => one(g.mul(p[0].recip())?),
            Op::Tanh => one(g.mul(out.square().neg().shift(1.0))?),
            Op::Relu => one(g.mul(p[0].step())?),
            Op::Square => one(g.mul(p[0])?.scale(2.0)),
            Op::Sqrt => one(g.mul(out.recip())?.scale(0.5)),
            Op::Recip => one(g.mul(out.square())?.neg()),
            Op::Sum => {
                let (r, c) = p[0].shape();
                one(g.broadcast_scalar(r, c)?)
            }
            Op::SumRows => one(g.broadcast_rows(p[0].shape().0)?),
            Op::SumCols => one(g.broadcast_cols(p[0].shape().1)?),
            Op::BroadcastScalar { .. } => one(g.sum()),
            Op::BroadcastRows { .. } => one(g.sum_rows()),
            Op::BroadcastCols { .. } => one(g.sum_cols()),
            Op::Transpose => one(g.t()),
            Op::L2NormalizeRows => {
                let cols = p[0].shape().1;
                let inv = p[0].square().sum_cols().shift(EPS).sqrt().recip();
                let radial = g.mul(out)?.sum_cols().broadcast_cols(cols)?;
                let tangent = g.sub(out.mul(radial)?)?;
                one(tangent.mul(inv.broadcast_cols(cols)?)?)
            }
            Op::Max | Op::Min => {
                let (r, c) = p[0].shape();
                let idx = arg_extreme(&p[0].value(), matches!(self, Op::Max));
                let map: Arc<[usize]> = Arc::from(vec![idx]);
                one(g.scatter_add(map, r, c)?)
            }
            Op::Gather { map, .. } => {
                let (r, c) = p[0].shape();
                one(g.scatter_add(Arc::clone(map), r, c)?)
            }
            Op::ScatterAdd { map, .. } => {
                let (r, c) = p[0].shape();
                one(g.gather(Arc::clone(map), r, c)?)
            }
            Op::ConcatRows => {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(p.len());
                for (i, parent) in p.iter().enumerate() {
                    let rows = parent.shape().0;
                    grads.push(if want(i) { Some(g.slice_rows(offset, rows)?) } else { None });
                    offset += rows;
                }
                Ok(grads)
            }
            Op::SliceRows { start, len } => {
                let (rows, cols) = p[0].shape();
                let graph = g.graph();
                let mut parts = Vec::with_capacity(3);
                if *start > 0 {
                    parts.push(graph.zeros(*start, cols));
                }
                parts.push(g);
                let tail = rows - start - len;
                if tail > 0 {
                    parts.push(graph.zeros(tail, cols));
                }
                one(concat_rows(&parts)?)
            }
        }
    }
}
