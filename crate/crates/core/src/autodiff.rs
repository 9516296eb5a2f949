//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] on a scalar node yields gradients for each parameter
//! leaf. The op set is exactly what the concept encoders, projectors and
//! heads need.

use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Constant sparse operator used for graph propagation (`y = A x`).
#[derive(Clone, Debug, Default)]
pub struct SparseOp {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseOp {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        assert_eq!(self.n_cols, x.rows(), "sparse operator shape mismatch");
        let mut out = Matrix::zeros(self.n_rows, x.cols());
        for &(r, c, w) in &self.entries {
            let src = x.row(c).to_vec();
            for (o, v) in out.row_mut(r).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        out
    }

    pub fn apply_transpose(&self, y: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n_cols, y.cols());
        for &(r, c, w) in &self.entries {
            let src = y.row(r).to_vec();
            for (o, v) in out.row_mut(c).iter_mut().zip(src) {
                *o += w * v;
            }
        }
        out
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Propagate(Var, Rc<SparseOp>),
    SegmentSum(Var, Rc<Vec<usize>>),
    CategoricalRelax {
        input: Var,
        soft: Matrix,
        tau: f64,
    },
    BceWithLogits(Var, Matrix),
    PairDistanceMean(Var, Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Matrix)> {
        self.grads.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut v = self.value(x).clone();
        assert_eq!(v.cols(), b.cols(), "bias width mismatch");
        let brow = b.row(0).to_vec();
        for r in 0..v.rows() {
            for (o, bb) in v.row_mut(r).iter_mut().zip(&brow) {
                *o += bb;
            }
        }
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    /// Per-column `(x - mean) * inv_std`. When `batch_stats` is set the
    /// mean and variance are treated as functions of the input and the
    /// backward pass differentiates through them.
    pub fn standardize(
        &mut self,
        x: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            for ((o, m), s) in v.row_mut(r).iter_mut().zip(mean).zip(&inv_std) {
                *o = (*o - m) * s;
            }
        }
        self.push(
            v,
            Op::Standardize {
                input: x,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hstack(&mats);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vstack(&mats);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        self.push(v, Op::SliceRows(x, start))
    }

    pub fn propagate(&mut self, x: Var, op: Rc<SparseOp>) -> Var {
        let v = op.apply(self.value(x));
        self.push(v, Op::Propagate(x, op))
    }

    /// Sums consecutive row groups; `offsets` has one more entry than groups.
    pub fn segment_sum(&mut self, x: Var, offsets: Rc<Vec<usize>>) -> Var {
        let input = self.value(x);
        let groups = offsets.len() - 1;
        let mut v = Matrix::zeros(groups, input.cols());
        for g in 0..groups {
            for r in offsets[g]..offsets[g + 1] {
                let src = input.row(r).to_vec();
                for (o, s) in v.row_mut(g).iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        self.push(v, Op::SegmentSum(x, offsets))
    }

    /// Row-wise categorical relaxation of `logits`.
    ///
    /// The soft assignment is `softmax((logits + noise) / tau)`. With `hard`
    /// the forward value is the one-hot argmax of the soft assignment while
    /// gradients flow through the soft one (straight-through estimator).
    pub fn categorical_relax(
        &mut self,
        logits: Var,
        noise: Option<&Matrix>,
        tau: f64,
        hard: bool,
    ) -> Var {
        let input = self.value(logits);
        let (rows, cols) = input.shape();
        let mut soft = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut z: Vec<f64> = input.row(r).to_vec();
            if let Some(n) = noise {
                for (zz, nn) in z.iter_mut().zip(n.row(r)) {
                    *zz += nn;
                }
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for zz in z.iter_mut() {
                *zz = ((*zz - m) / tau).exp();
                total += *zz;
            }
            for (o, zz) in soft.row_mut(r).iter_mut().zip(z) {
                *o = zz / total;
            }
        }
        let value = if hard {
            let mut h = Matrix::zeros(rows, cols);
            for r in 0..rows {
                let j = soft.argmax_row(r);
                h.set(r, j, 1.0);
            }
            h
        } else {
            soft.clone()
        };
        self.push(
            value,
            Op::CategoricalRelax {
                input: logits,
                soft,
                tau,
            },
        )
    }

    /// Mean binary cross-entropy over every entry, with the sigmoid fused in.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape(), "bce shape mismatch");
        let loss = bce_with_logits_value(x, &targets);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::BceWithLogits(logits, targets),
        )
    }

    /// Mean over `rows` of the Euclidean distance between matching rows.
    pub fn pair_distance_mean(&mut self, a: Var, b: Var, rows: Vec<usize>) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "pair distance shape mismatch");
        let value = if rows.is_empty() {
            0.0
        } else {
            rows.iter()
                .map(|&r| crate::tensor::euclidean(ma.row(r), mb.row(r)))
                .sum::<f64>()
                / rows.len() as f64
        };
        self.push(
            Matrix::filled(1, 1, value),
            Op::PairDistanceMean(a, b, rows),
        )
    }

    /// Backpropagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.grads.iter_mut().find(|(p, _)| p == id) {
                    Some((_, acc)) => acc.add_assign(&g),
                    None => out.grads.push((*id, g)),
                },
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(x, bias) => {
                    let gb = Matrix::from_vec(1, g.cols(), g.column_sums());
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, s) => accumulate(&mut grads, *x, g.scale(*s)),
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gg, v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *gg = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mut gx = g;
                    for (gg, v) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if *v <= 0.0 {
                            *gg *= slope;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gg, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gg *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Standardize {
                    input,
                    inv_std,
                    batch_stats,
                } => {
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    if *batch_stats {
                        let n = rows as f64;
                        let mut sum_g = vec![0.0; cols];
                        let mut sum_gy = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                sum_g[c] += g.get(r, c);
                                sum_gy[c] += g.get(r, c) * y.get(r, c);
                            }
                        }
                        for r in 0..rows {
                            for c in 0..cols {
                                let v = inv_std[c] / n
                                    * (n * g.get(r, c) - sum_g[c] - y.get(r, c) * sum_gy[c]);
                                gx.set(r, c, v);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for c in 0..cols {
                                gx.set(r, c, g.get(r, c) * inv_std[c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, h));
                        offset += h;
                    }
                }
                Op::SliceRows(x, start) => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Propagate(x, op) => accumulate(&mut grads, *x, op.apply_transpose(&g)),
                Op::SegmentSum(x, offsets) => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for gi in 0..offsets.len() - 1 {
                        for r in offsets[gi]..offsets[gi + 1] {
                            gx.row_mut(r).copy_from_slice(g.row(gi));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CategoricalRelax { input, soft, tau } => {
                    let (rows, cols) = soft.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let p = soft.row(r);
                        let gr = g.row(r);
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx.set(r, c, p[c] * (gr[c] - dot) / tau);
                        }
                    }
                    accumulate(&mut grads, *input, gx);
                }
                Op::BceWithLogits(logits, targets) => {
                    let x = self.value(*logits);
                    let scale = g.get(0, 0) / x.data().len() as f64;
                    let mut gx = Matrix::zeros(x.rows(), x.cols());
                    for ((o, xv), t) in gx.data_mut().iter_mut().zip(x.data()).zip(targets.data()) {
                        *o = (sigmoid(*xv) - t) * scale;
                    }
                    accumulate(&mut grads, *logits, gx);
                }
                Op::PairDistanceMean(a, b, rows) => {
                    if rows.is_empty() {
                        continue;
                    }
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let scale = g.get(0, 0) / rows.len() as f64;
                    let mut ga = Matrix::zeros(ma.rows(), ma.cols());
                    let mut gb = Matrix::zeros(mb.rows(), mb.cols());
                    for &r in rows {
                        let d = crate::tensor::euclidean(ma.row(r), mb.row(r));
                        if d == 0.0 {
                            continue;
                        }
                        for c in 0..ma.cols() {
                            let v = scale * (ma.get(r, c) - mb.get(r, c)) / d;
                            ga.set(r, c, ga.get(r, c) + v);
                            gb.set(r, c, gb.get(r, c) - v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable `max(x,0) - x t + ln(1 + e^{-|x|})`, averaged.
pub fn bce_with_logits_value(logits: &Matrix, targets: &Matrix) -> f64 {
    let n = logits.data().len();
    if n == 0 {
        return 0.0;
    }
    logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
        .sum::<f64>()
        / n as f64
}
