//! Test-only oracles: central finite differences, brute-force pair
//! enumeration and a hand-rolled softmax. Nothing here calls into the code
//! paths these helpers are used to check, except to build the function under
//! test.

#![allow(dead_code)]

use std::sync::Arc;

use metaug::diff::{backward, concat_rows, Graph, Mat, Var, GATHER_ZERO};
use metaug::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Builds a (possibly non-scalar) output from the inputs.
pub type Build = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

/// Scalarize `y` as `sum(c*y) + 0.5*sum(d*y^2)` so linear ops still have a
/// non-trivial second derivative.
fn scalarize<'g>(g: &'g Graph, y: Var<'g>, c: &Mat, d: &Mat) -> Result<Var<'g>> {
    let lin = y.mul(g.constant(c.clone()))?.sum();
    let quad = y.square().mul(g.constant(d.clone()))?.sum().scale(0.5);
    lin.add(quad)
}

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Mat>,
    pub build: Build,
    c: Mat,
    d: Mat,
}

impl Case {
    fn eval(&self, inputs: &[Mat]) -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let y = (self.build)(&g, &vars).unwrap();
        scalarize(&g, y, &self.c, &self.d).unwrap().item()
    }

    fn grad_at(&self, inputs: &[Mat]) -> Vec<Mat> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
        let y = (self.build)(&g, &vars).unwrap();
        let s = scalarize(&g, y, &self.c, &self.d).unwrap();
        let rec = backward(s, &vars, false).unwrap();
        rec.gradients.iter().map(|v| (*v.value()).clone()).collect()
    }

    pub fn analytic_grad(&self) -> Vec<Mat> {
        self.grad_at(&self.inputs)
    }

    pub fn numeric_grad(&self) -> Vec<Mat> {
        numeric(&self.inputs, |x| self.eval(x))
    }

    /// Gradient of `<proj, grad f>` obtained by differentiating the recorded gradient.
    pub fn analytic_second(&self, proj: &[Mat]) -> Vec<Mat> {
        let g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|m| g.param(m.clone())).collect();
        let y = (self.build)(&g, &vars).unwrap();
        let s = scalarize(&g, y, &self.c, &self.d).unwrap();
        let rec = backward(s, &vars, true).unwrap();
        let mut total = g.scalar(0.0);
        for (gr, p) in rec.gradients.iter().zip(proj) {
            total = total.add(gr.mul(g.constant(p.clone())).unwrap().sum()).unwrap();
        }
        let second = backward(total, &vars, false).unwrap();
        second.gradients.iter().map(|v| (*v.value()).clone()).collect()
    }

    /// Finite differences of `<proj, grad f>` using first-order gradients only.
    pub fn numeric_second(&self, proj: &[Mat]) -> Vec<Mat> {
        numeric(&self.inputs, |x| {
            self.grad_at(x).iter().zip(proj).map(|(gr, p)| (gr * p).sum()).sum()
        })
    }
}

/// Central finite differences of `f` at `inputs`.
pub fn numeric(inputs: &[Mat], mut f: impl FnMut(&[Mat]) -> f64) -> Vec<Mat> {
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut grad = Mat::zeros(inputs[k].dim());
        for idx in 0..inputs[k].len() {
            let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
            let mut plus = inputs.to_vec();
            plus[k][[r, c]] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k][[r, c]] -= FD_STEP;
            grad[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        out.push(grad);
    }
    out
}

/// Max-norm relative error between two gradient lists.
pub fn rel_err(a: &[Mat], b: &[Mat]) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.iter().zip(y.iter()) {
            diff = diff.max((u - v).abs());
            scale = scale.max(u.abs()).max(v.abs());
        }
    }
    diff / scale.max(1e-8)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in [lo, hi], nudged away from zero so kinks are not straddled.
pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| {
        let mut v: f64 = rng.gen_range(lo..hi);
        if v.abs() < 1e-2 {
            v += 0.05;
        }
        v
    })
}

/// One randomized composition per primitive kernel.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let n = r.gen_range(2..5);
    let m = r.gen_range(2..5);
    let k = r.gen_range(2..4);
    let mut cases = Vec::new();
    let mut push = |r: &mut ChaCha8Rng, name: &'static str, inputs: Vec<Mat>, build: Build| {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let (yr, yc) = build(&g, &vars).unwrap().shape();
        let c = uniform(r, yr, yc, -1.0, 1.0);
        let d = uniform(r, yr, yc, -1.0, 1.0);
        cases.push(Case { name, inputs, build, c, d });
    };
    let sym = |r: &mut ChaCha8Rng, a: usize, b: usize| uniform(r, a, b, -2.0, 2.0);
    let pos = |r: &mut ChaCha8Rng, a: usize, b: usize| uniform(r, a, b, 0.3, 2.0);

    let i = vec![sym(&mut r, n, m), sym(&mut r, m, k)];
    push(&mut r, "matmul", i, |_, v| v[0].matmul(v[1]));
    let i = vec![sym(&mut r, n, m), sym(&mut r, n, m)];
    push(&mut r, "add", i, |_, v| v[0].add(v[1]));
    let i = vec![sym(&mut r, n, m), sym(&mut r, n, m)];
    push(&mut r, "sub", i, |_, v| v[0].sub(v[1]));
    let i = vec![sym(&mut r, n, m), sym(&mut r, n, m)];
    push(&mut r, "mul", i, |_, v| v[0].mul(v[1]));
    let i = vec![sym(&mut r, n, m), sym(&mut r, 1, m)];
    push(&mut r, "add_row_broadcast", i, |_, v| v[0].add(v[1]));
    let i = vec![sym(&mut r, n, m), sym(&mut r, n, 1)];
    push(&mut r, "mul_col_broadcast", i, |_, v| v[0].mul(v[1]));
    let i = vec![sym(&mut r, n, m), sym(&mut r, 1, 1)];
    push(&mut r, "mul_scalar_broadcast", i, |_, v| v[0].mul(v[1]));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "scale", i, |_, v| Ok(v[0].scale(1.7)));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "shift", i, |_, v| Ok(v[0].shift(0.3)));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "exp", i, |_, v| Ok(v[0].exp()));
    let i = vec![pos(&mut r, n, m)];
    push(&mut r, "log", i, |_, v| Ok(v[0].ln()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "tanh", i, |_, v| Ok(v[0].tanh()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "relu", i, |_, v| Ok(v[0].relu()));
    let i = vec![sym(&mut r, n, m), sym(&mut r, n, m)];
    push(&mut r, "step", i, |_, v| v[0].step().add(v[1]));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "square", i, |_, v| Ok(v[0].square()));
    let i = vec![pos(&mut r, n, m)];
    push(&mut r, "sqrt", i, |_, v| Ok(v[0].sqrt()));
    let i = vec![pos(&mut r, n, m)];
    push(&mut r, "recip", i, |_, v| Ok(v[0].recip()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "sum", i, |_, v| Ok(v[0].sum()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "mean", i, |_, v| Ok(v[0].mean()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "sum_rows", i, |_, v| Ok(v[0].sum_rows()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "sum_cols", i, |_, v| Ok(v[0].sum_cols()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "transpose", i, |_, v| Ok(v[0].t()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "l2_normalize_rows", i, |_, v| Ok(v[0].l2_normalize_rows()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "max", i, |_, v| Ok(v[0].max()));
    let i = vec![sym(&mut r, n, m)];
    push(&mut r, "min", i, |_, v| Ok(v[0].min()));
    let i = vec![sym(&mut r, 3, 4)];
    push(&mut r, "gather", i, |_, v| {
        let map: Arc<[usize]> = Arc::from(vec![5, 0, GATHER_ZERO, 11, 5, 7]);
        v[0].gather(map, 2, 3)
    });
    let i = vec![sym(&mut r, 2, 3)];
    push(&mut r, "scatter_add", i, |_, v| {
        let map: Arc<[usize]> = Arc::from(vec![3, 0, 3, GATHER_ZERO, 1, 2]);
        v[0].scatter_add(map, 2, 2)
    });
    let i = vec![sym(&mut r, n, m), sym(&mut r, 2, m)];
    push(&mut r, "concat_rows", i, |_, v| concat_rows(&[v[0], v[1]]));
    let i = vec![sym(&mut r, 4, m)];
    push(&mut r, "slice_rows", i, |_, v| v[0].slice_rows(1, 2));
    cases
}

/// First- and second-order relative errors for one case.
pub fn check_case(case: &Case, seed: u64) -> (f64, f64) {
    let first = rel_err(&case.analytic_grad(), &case.numeric_grad());
    let mut r = rng(seed ^ 0x5eed);
    let proj: Vec<Mat> = case
        .inputs
        .iter()
        .map(|x| uniform(&mut r, x.nrows(), x.ncols(), -1.0, 1.0))
        .collect();
    let second = rel_err(&case.analytic_second(&proj), &case.numeric_second(&proj));
    (first, second)
}
