//! Tape-based reverse-mode autodiff over `f64` matrices.
//!
//! Every tensor in the training graph is an `Array2<f64>`; scalars are 1x1.
//! Nodes are appended to a `Graph` in topological order, so `backward` is a
//! single reverse sweep. The op set is exactly what the policy, adapters, and
//! objectives need — no broadcasting rules beyond the ones implemented here.

use std::sync::Arc;

use ndarray::{Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// a (n x d) + row (1 x d) broadcast over rows.
    AddRowBroadcast(Var, Var),
    /// a.dot(b)
    MatMul(Var, Var),
    /// a.dot(b.t())
    MatMulNT(Var, Var),
    /// a.t().dot(b)
    MatMulTN(Var, Var),
    /// Row gather; duplicates accumulate on backward (also used for embeddings).
    SelectRows(Var, Arc<Vec<usize>>),
    SelectCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Per-row softmax over allowed entries; forbidden entries are exactly 0.
    SoftmaxRowsMasked(Var, Arc<Array2<bool>>),
    LogSoftmaxRows(Var),
    /// One column index per row -> (n x 1).
    GatherPerRow(Var, Arc<Vec<usize>>),
    /// x / rms(x) per row, scaled by a learned (1 x d) gain.
    RmsNormRows { x: Var, gain: Var, eps: f64 },
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    /// Elementwise min; ties route the gradient to the first argument.
    MinElem(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    MulConst(Var, Arc<Array2<f64>>),
    AddConst(Var),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "expected scalar node");
        a[(0, 0)]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input node.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), rq)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), rq)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), rq)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let rq = self.requires(a);
        self.push(v, Op::Neg(a), rq)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rq = self.requires(a);
        self.push(v, Op::AddScalar(a), rq)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rq = self.requires(a);
        self.push(v, Op::MulScalar(a, c), rq)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.nodes[row.0].value.nrows(), 1, "broadcast arg must be 1 x d");
        assert_eq!(self.nodes[a.0].value.ncols(), self.nodes[row.0].value.ncols());
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let rq = self.requires(a) || self.requires(row);
        self.push(v, Op::AddRowBroadcast(a, row), rq)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMul(a, b), rq)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMulNT(a, b), rq)
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.t().dot(&self.nodes[b.0].value);
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::MatMulTN(a, b), rq)
    }

    pub fn select_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Var {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        let rq = self.requires(a);
        self.push(v, Op::SelectRows(a, rows), rq)
    }

    pub fn select_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let rq = self.requires(a);
        self.push(v, Op::SelectCols(a, start, end), rq)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let rq = parts.iter().any(|p| self.requires(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rq)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let rq = parts.iter().any(|p| self.requires(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rq)
    }

    /// Masked row softmax. Entries where `mask` is false come out exactly 0.0,
    /// and the normalization runs over allowed entries only. Rows with no
    /// allowed entry come out all-zero.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: Arc<Array2<bool>>) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.dim(), mask.dim(), "mask shape mismatch");
        let mut v = Array2::zeros(x.dim());
        for (i, row) in x.outer_iter().enumerate() {
            let mut m = f64::NEG_INFINITY;
            for (j, &xv) in row.iter().enumerate() {
                if mask[(i, j)] && xv > m {
                    m = xv;
                }
            }
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for (j, &xv) in row.iter().enumerate() {
                if mask[(i, j)] {
                    denom += (xv - m).exp();
                }
            }
            for (j, &xv) in row.iter().enumerate() {
                if mask[(i, j)] {
                    v[(i, j)] = (xv - m).exp() / denom;
                }
            }
        }
        let rq = self.requires(a);
        self.push(v, Op::SoftmaxRowsMasked(a, mask), rq)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros(x.dim());
        for (i, row) in x.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&xv| (xv - m).exp()).sum::<f64>().ln();
            for (j, &xv) in row.iter().enumerate() {
                v[(i, j)] = xv - lse;
            }
        }
        let rq = self.requires(a);
        self.push(v, Op::LogSoftmaxRows(a), rq)
    }

    pub fn gather_per_row(&mut self, a: Var, cols: Arc<Vec<usize>>) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows(), cols.len());
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, &c) in cols.iter().enumerate() {
            v[(i, 0)] = x[(i, c)];
        }
        let rq = self.requires(a);
        self.push(v, Op::GatherPerRow(a, cols), rq)
    }

    pub fn rms_norm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let a = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        assert_eq!(g.nrows(), 1);
        assert_eq!(g.ncols(), a.ncols());
        let d = a.ncols() as f64;
        let mut v = Array2::zeros(a.dim());
        for (i, row) in a.outer_iter().enumerate() {
            let ms = row.iter().map(|&t| t * t).sum::<f64>() / d;
            let inv = 1.0 / (ms + eps).sqrt();
            for (j, &t) in row.iter().enumerate() {
                v[(i, j)] = t * inv * g[(0, j)];
            }
        }
        let rq = self.requires(x) || self.requires(gain);
        self.push(v, Op::RmsNormRows { x, gain, eps }, rq)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu_tanh);
        let rq = self.requires(a);
        self.push(v, Op::Gelu(a), rq)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let rq = self.requires(a);
        self.push(v, Op::Exp(a), rq)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let rq = self.requires(a);
        self.push(v, Op::Ln(a), rq)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let rq = self.requires(a);
        self.push(v, Op::Clamp(a, lo, hi), rq)
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.dim(), bv.dim());
        let mut v = Array2::zeros(av.dim());
        ndarray::Zip::from(&mut v).and(av).and(bv).for_each(|o, &x, &y| {
            *o = if x <= y { x } else { y };
        });
        let rq = self.requires(a) || self.requires(b);
        self.push(v, Op::MinElem(a, b), rq)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let rq = self.requires(a);
        self.push(v, Op::MeanAll(a), rq)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rq = self.requires(a);
        self.push(v, Op::SumAll(a), rq)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Array2<f64>>) -> Var {
        let v = &self.nodes[a.0].value * &*c;
        let rq = self.requires(a);
        self.push(v, Op::MulConst(a, c), rq)
    }

    pub fn add_const(&mut self, a: Var, c: Arc<Array2<f64>>) -> Var {
        let v = &self.nodes[a.0].value + &*c;
        let rq = self.requires(a);
        self.push(v, Op::AddConst(a), rq)
    }

    fn accum(&mut self, v: Var, delta: &Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => *g += delta,
            None => self.nodes[v.0].grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a 1x1 root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        self.nodes[root.0].grad = Some(Array2::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            // take the op out so we can mutate grads of inputs
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Constant);
            match &op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accum(*a, &gy);
                    self.accum(*b, &gy);
                }
                Op::Sub(a, b) => {
                    self.accum(*a, &gy);
                    let d = gy.mapv(|x| -x);
                    self.accum(*b, &d);
                }
                Op::Mul(a, b) => {
                    let da = &gy * &self.nodes[b.0].value;
                    let db = &gy * &self.nodes[a.0].value;
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::Neg(a) => {
                    let d = gy.mapv(|x| -x);
                    self.accum(*a, &d);
                }
                Op::AddScalar(a) => self.accum(*a, &gy),
                Op::MulScalar(a, c) => {
                    let d = gy.mapv(|x| x * c);
                    self.accum(*a, &d);
                }
                Op::AddRowBroadcast(a, row) => {
                    self.accum(*a, &gy);
                    let d = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(*row, &d);
                }
                Op::MatMul(a, b) => {
                    let da = gy.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&gy);
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::MatMulNT(a, b) => {
                    // y = a b^T : da = gy b ; db = gy^T a
                    let da = gy.dot(&self.nodes[b.0].value);
                    let db = gy.t().dot(&self.nodes[a.0].value);
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::MatMulTN(a, b) => {
                    // y = a^T b : da = b gy^T ; db = a gy
                    let da = self.nodes[b.0].value.dot(&gy.t());
                    let db = self.nodes[a.0].value.dot(&gy);
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::SelectRows(a, rows) => {
                    let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &gy.row(i);
                    }
                    self.accum(*a, &d);
                }
                Op::SelectCols(a, start, _end) => {
                    let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                    d.slice_mut(ndarray::s![.., *start..*start + gy.ncols()])
                        .assign(&gy);
                    self.accum(*a, &d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let d = gy.slice(ndarray::s![.., off..off + w]).to_owned();
                        self.accum(*p, &d);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.nrows();
                        let d = gy.slice(ndarray::s![off..off + h, ..]).to_owned();
                        self.accum(*p, &d);
                        off += h;
                    }
                }
                Op::SoftmaxRowsMasked(a, mask) => {
                    let y = &self.nodes[idx].value;
                    let mut d = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let mut dot = 0.0;
                        for j in 0..y.ncols() {
                            if mask[(i, j)] {
                                dot += gy[(i, j)] * y[(i, j)];
                            }
                        }
                        for j in 0..y.ncols() {
                            if mask[(i, j)] {
                                d[(i, j)] = y[(i, j)] * (gy[(i, j)] - dot);
                            }
                        }
                    }
                    self.accum(*a, &d);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut d = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let s: f64 = gy.row(i).sum();
                        for j in 0..y.ncols() {
                            d[(i, j)] = gy[(i, j)] - y[(i, j)].exp() * s;
                        }
                    }
                    self.accum(*a, &d);
                }
                Op::GatherPerRow(a, cols) => {
                    let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                    for (i, &c) in cols.iter().enumerate() {
                        d[(i, c)] += gy[(i, 0)];
                    }
                    self.accum(*a, &d);
                }
                Op::RmsNormRows { x, gain, eps } => {
                    let a = &self.nodes[x.0].value;
                    let g = &self.nodes[gain.0].value;
                    let d = a.ncols() as f64;
                    let mut dx = Array2::zeros(a.dim());
                    let mut dg = Array2::zeros((1, a.ncols()));
                    for i in 0..a.nrows() {
                        let row = a.row(i);
                        let ms = row.iter().map(|&t| t * t).sum::<f64>() / d;
                        let inv = 1.0 / (ms + eps).sqrt();
                        // dl/dx = g*inv*gy - x * inv^3/d * sum(gy*g*x)
                        let mut dot = 0.0;
                        for j in 0..a.ncols() {
                            dot += gy[(i, j)] * g[(0, j)] * row[j];
                            dg[(0, j)] += gy[(i, j)] * row[j] * inv;
                        }
                        for j in 0..a.ncols() {
                            dx[(i, j)] =
                                gy[(i, j)] * g[(0, j)] * inv - row[j] * inv.powi(3) / d * dot;
                        }
                    }
                    self.accum(*x, &dx);
                    self.accum(*gain, &dg);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut d = gy.clone();
                    ndarray::Zip::from(&mut d).and(x).for_each(|o, &t| {
                        *o *= gelu_tanh_deriv(t);
                    });
                    self.accum(*a, &d);
                }
                Op::Exp(a) => {
                    let d = &gy * &self.nodes[idx].value;
                    self.accum(*a, &d);
                }
                Op::Ln(a) => {
                    let d = &gy / &self.nodes[a.0].value;
                    self.accum(*a, &d);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a.0].value;
                    let mut d = gy.clone();
                    ndarray::Zip::from(&mut d).and(x).for_each(|o, &t| {
                        if t <= *lo || t >= *hi {
                            *o = 0.0;
                        }
                    });
                    self.accum(*a, &d);
                }
                Op::MinElem(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    ndarray::Zip::indexed(av).and(bv).for_each(|(i, j), &x, &y| {
                        if x <= y {
                            da[(i, j)] = gy[(i, j)];
                        } else {
                            db[(i, j)] = gy[(i, j)];
                        }
                    });
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let d = Array2::from_elem(self.nodes[a.0].value.dim(), gy[(0, 0)] / n);
                    self.accum(*a, &d);
                }
                Op::SumAll(a) => {
                    let d = Array2::from_elem(self.nodes[a.0].value.dim(), gy[(0, 0)]);
                    self.accum(*a, &d);
                }
                Op::MulConst(a, c) => {
                    let d = &gy * &**c;
                    self.accum(*a, &d);
                }
                Op::AddConst(a) => self.accum(*a, &gy),
            }
            self.nodes[idx].op = op;
        }
    }
}

pub fn gelu_tanh(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const K: f64 = 0.7978845608028654;
    let u = K * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            let u1: f64 = rng.gen_range(1e-9..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central finite-difference check of d(scalar)/d(input) for an arbitrary
    /// graph builder. `build` must return a 1x1 output var.
    fn fd_check<F>(input: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let out = build(&mut g, x);
        g.backward(out);
        let analytic = g.grad(x).expect("missing grad").clone();

        let h = 1e-5;
        for i in 0..input.nrows() {
            for j in 0..input.ncols() {
                let mut plus = input.clone();
                plus[(i, j)] += h;
                let mut minus = input.clone();
                minus[(i, j)] -= h;
                let mut gp = Graph::new();
                let xp = gp.leaf(plus);
                let op = build(&mut gp, xp);
                let mut gm = Graph::new();
                let xm = gm.leaf(minus);
                let om = build(&mut gm, xm);
                let fd = (gp.scalar_value(op) - gm.scalar_value(om)) / (2.0 * h);
                let a = analytic[(i, j)];
                let denom = a.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (a - fd).abs() / denom < tol,
                    "grad mismatch at ({i},{j}): analytic={a} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = randn(&mut rng, 4, 3);
        fd_check(randn(&mut rng, 5, 4), move |g, x| {
            let wv = g.constant(w.clone());
            let y = g.matmul(x, wv);
            let y = g.gelu(y);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn fd_matmul_transposed_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = randn(&mut rng, 6, 4);
        let bc = b.clone();
        fd_check(randn(&mut rng, 5, 4), move |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul_nt(x, bv);
            g.sum_all(y)
        }, 1e-6);
        fd_check(randn(&mut rng, 6, 3), move |g, x| {
            let bv = g.constant(bc.clone());
            let y = g.matmul_tn(bv, x);
            let y2 = g.mul(y, y);
            g.mean_all(y2)
        }, 1e-6);
    }

    #[test]
    fn fd_masked_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mask = Array2::from_elem((4, 4), true);
        mask[(0, 2)] = false;
        mask[(0, 3)] = false;
        mask[(1, 3)] = false;
        mask[(3, 0)] = false;
        let mask = Arc::new(mask);
        let weights = randn(&mut rng, 4, 1);
        fd_check(randn(&mut rng, 4, 4), move |g, x| {
            let p = g.softmax_rows_masked(x, mask.clone());
            let w = g.constant(weights.clone());
            let y = g.matmul(p, w);
            g.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn masked_softmax_forbidden_entries_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mask = Array2::from_elem((8, 8), false);
        for i in 0..8 {
            for j in 0..=i {
                mask[(i, j)] = true;
            }
        }
        mask[(5, 2)] = false;
        let mut g = Graph::new();
        let x = g.leaf(randn(&mut rng, 8, 8));
        let p = g.softmax_rows_masked(x, Arc::new(mask.clone()));
        for i in 0..8 {
            let mut sum = 0.0;
            for j in 0..8 {
                if !mask[(i, j)] {
                    assert_eq!(g.value(p)[(i, j)], 0.0);
                } else {
                    sum += g.value(p)[(i, j)];
                }
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fd_rmsnorm_and_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gain = randn(&mut rng, 1, 6).mapv(|x| 1.0 + 0.1 * x);
        let gain2 = gain.clone();
        let x0 = randn(&mut rng, 3, 6);
        fd_check(x0.clone(), move |g, x| {
            let gv = g.constant(gain.clone());
            let y = g.rms_norm_rows(x, gv, 1e-6);
            let y2 = g.mul(y, y);
            g.mean_all(y2)
        }, 1e-6);
        // gradient w.r.t. gain
        fd_check(gain2, move |g, gn| {
            let xv = g.constant(x0.clone());
            let y = g.rms_norm_rows(xv, gn, 1e-6);
            let y2 = g.mul(y, y);
            g.mean_all(y2)
        }, 1e-6);
    }

    #[test]
    fn fd_log_softmax_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cols = Arc::new(vec![0usize, 2, 1]);
        fd_check(randn(&mut rng, 3, 4), move |g, x| {
            let ls = g.log_softmax_rows(x);
            let picked = g.gather_per_row(ls, cols.clone());
            let m = g.mean_all(picked);
            g.neg(m)
        }, 1e-6);
    }

    #[test]
    fn fd_select_concat_exp_ln_clamp_min() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows = Arc::new(vec![1usize, 1, 0, 3]);
        let other = randn(&mut rng, 4, 4).mapv(|x| x * 0.3);
        fd_check(randn(&mut rng, 4, 4).mapv(|x| 0.2 * x), move |g, x| {
            let s = g.select_rows(x, rows.clone());
            let a = g.select_cols(s, 0, 2);
            let b = g.select_cols(s, 2, 4);
            let c = g.concat_cols(&[a, b]);
            let e = g.exp(c);
            let l = g.ln(e);
            let cl = g.clamp(l, -0.4, 0.4);
            let o = g.constant(other.clone());
            let mn = g.min_elem(cl, o);
            g.mean_all(mn)
        }, 1e-5);
    }

    #[test]
    fn fd_row_broadcast_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = randn(&mut rng, 5, 3);
        fd_check(randn(&mut rng, 1, 3), move |g, bias| {
            let xv = g.constant(x0.clone());
            let y = g.add_row_broadcast(xv, bias);
            let y2 = g.mul(y, y);
            g.mean_all(y2)
        }, 1e-6);
    }

    #[test]
    fn select_rows_accumulates_duplicates() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let s = g.select_rows(x, Arc::new(vec![0, 0, 1]));
        let out = g.sum_all(s);
        g.backward(out);
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[(0, 0)], 2.0);
        assert_eq!(grad[(1, 0)], 1.0);
    }
}
