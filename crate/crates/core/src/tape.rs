//! A small reverse-mode automatic differentiation tape over [`Mat`].
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns a [`Grads`] table indexed by [`Var`].
//!
//! Only nodes that depend on a leaf created with `requires_grad = true`
//! receive gradients. Constants (adjacency matrices, targets, masks) are
//! plain leaves and cost nothing on the backward sweep.

use crate::tensor::{axpy, dot, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softplus(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ShiftRows(Var, isize),
    GatherRows(Var, Vec<usize>),
    Ema(Var, f64),
    WindowMax { x: Var, argmax: Vec<usize> },
    ProposalInit { x: Var, argmax: Vec<usize>, side: usize },
    Conv2dMasked { x: Var, w: Var, b: Var, side: usize },
    WeightedSum(Var, Mat),
    Sum(Var),
    LogSoftmaxRows(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer normalisation without affine parameters.
/// Returns the normalised matrix and each row's `1 / sqrt(var + eps)`.
pub fn layer_norm_rows(x: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let (rows, cols) = x.shape();
    let mut out = Mat::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * s;
        }
        inv_std.push(s);
    }
    (out, inv_std)
}

/// Upper-triangular validity of cell `(i, j)` on a `side x side` grid.
#[inline]
pub fn cell_valid(i: usize, j: usize) -> bool {
    i <= j
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// A leaf that receives gradients (parameters, checked inputs).
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "add_row expects a 1xC row");
        let mut v = am.clone();
        for i in 0..v.rows() {
            axpy(1.0, rm.row(0), v.row_mut(i));
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` element-wise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "mul_row expects a 1xC row");
        let mut v = am.clone();
        for i in 0..v.rows() {
            for (x, w) in v.row_mut(i).iter_mut().zip(rm.row(0)) {
                *x *= w;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    /// `log(1 + e^x)`
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Per-row zero mean, unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (v, inv_std) = layer_norm_rows(self.value(a), eps);
        let ng = self.ng(a);
        self.push(v, Op::LayerNormRows { x: a, inv_std }, ng)
    }

    /// Scales every row to unit L2 norm; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let n = dot(x.row(i), x.row(i)).sqrt();
            norms.push(n);
            let r = v.row_mut(i);
            if n > 0.0 {
                r.iter_mut().for_each(|e| *e /= n);
            } else {
                r.iter_mut().for_each(|e| *e = 0.0);
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::RowNormalize { x: a, norms }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows(a, start), ng)
    }

    /// `out[t] = a[t + offset]`, zero outside the valid range.
    pub fn shift_rows(&mut self, a: Var, offset: isize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut v = Mat::zeros(rows, cols);
        for t in 0..rows {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < rows {
                v.row_mut(t).copy_from_slice(x.row(src as usize));
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::ShiftRows(a, offset), ng)
    }

    /// `out[r] = a[idx[r]]`
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            v.row_mut(r).copy_from_slice(x.row(i));
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Causal exponential moving average over rows:
    /// `h[t] = decay * h[t-1] + (1 - decay) * a[t]`, `h[-1] = 0`.
    pub fn ema(&mut self, a: Var, decay: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut v = Mat::zeros(rows, cols);
        let mut h = vec![0.0; cols];
        for t in 0..rows {
            for (hc, xc) in h.iter_mut().zip(x.row(t)) {
                *hc = decay * *hc + (1.0 - decay) * xc;
            }
            v.row_mut(t).copy_from_slice(&h);
        }
        let ng = self.ng(a);
        self.push(v, Op::Ema(a, decay), ng)
    }

    /// Column-wise max over non-overlapping windows of `n` rows.
    /// Panics unless `n` divides the row count.
    pub fn window_max(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        assert!(n >= 1 && rows % n == 0, "window_max: {n} does not divide {rows}");
        let out_rows = rows / n;
        let mut v = Mat::zeros(out_rows, cols);
        let mut argmax = vec![0usize; out_rows * cols];
        for w in 0..out_rows {
            for c in 0..cols {
                let mut best = w * n;
                for r in w * n + 1..(w + 1) * n {
                    if x.get(r, c) > x.get(best, c) {
                        best = r;
                    }
                }
                v.set(w, c, x.get(best, c));
                argmax[w * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::WindowMax { x: a, argmax }, ng)
    }

    /// Initial 2-D proposal map from an `L x D` sequence:
    /// cell `(i, j)`, `i <= j`, holds `max(f_i..=f_j) + f_i + f_j`;
    /// cells with `i > j` are zero. Output is `(L*L) x D`.
    pub fn proposal_init(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (side, cols) = x.shape();
        let mut v = Mat::zeros(side * side, cols);
        let mut argmax = vec![usize::MAX; side * side * cols];
        for i in 0..side {
            // running max as j extends to the right
            let mut best: Vec<usize> = vec![i; cols];
            for j in i..side {
                let cell = i * side + j;
                for c in 0..cols {
                    if x.get(j, c) > x.get(best[c], c) {
                        best[c] = j;
                    }
                    v.set(cell, c, x.get(best[c], c) + x.get(i, c) + x.get(j, c));
                    argmax[cell * cols + c] = best[c];
                }
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::ProposalInit { x: a, argmax, side }, ng)
    }

    /// Masked 3x3 same-padded convolution over an upper-triangular
    /// `side x side` grid stored as `(side*side) x C_in`.
    ///
    /// `w` is `(9 * C_in) x C_out`, kernel offset `k = (di+1)*3 + (dj+1)`
    /// owning rows `k*C_in..(k+1)*C_in`; `b` is `1 x C_out`. Invalid input
    /// cells are ignored and invalid output cells are zero.
    pub fn conv2d_masked(&mut self, x: Var, w: Var, b: Var, side: usize) -> Var {
        let xm = self.value(x);
        let wm = self.value(w);
        let bm = self.value(b);
        let cin = xm.cols();
        let cout = wm.cols();
        assert_eq!(xm.rows(), side * side, "conv2d_masked: grid rows");
        assert_eq!(wm.rows(), 9 * cin, "conv2d_masked: kernel rows");
        assert_eq!(bm.shape(), (1, cout), "conv2d_masked: bias");
        let mut v = Mat::zeros(side * side, cout);
        for i in 0..side {
            for j in i..side {
                let cell = i * side + j;
                let out = &mut v.as_mut_slice()[cell * cout..(cell + 1) * cout];
                out.copy_from_slice(bm.row(0));
                for_each_neighbor(i, j, side, |k, n| {
                    let xr = xm.row(n);
                    for (ci, &xv) in xr.iter().enumerate() {
                        if xv != 0.0 {
                            axpy(xv, wm.row(k * cin + ci), out);
                        }
                    }
                });
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2dMasked { x, w, b, side }, ng)
    }

    /// `Σ weights ⊙ a` as a `1 x 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Mat) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s = dot(x.as_slice(), weights.as_slice());
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::WeightedSum(a, weights), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Mat::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for i in 0..x.rows() {
            let r = v.row_mut(i);
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            r.iter_mut().for_each(|e| *e -= lse);
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// Sum of several `1 x 1` nodes with coefficients.
    pub fn linear_combination(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc = self.constant(Mat::scalar(0.0));
        for &(c, v) in terms {
            let s = self.scale(v, c);
            acc = self.add(acc, s);
        }
        acc
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(out) {
            return Grads { grads };
        }
        grads[out.0] = Some(Mat::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, f: impl FnOnce(&mut Mat)) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Mat::zeros(r, c));
        }
        f(slot.as_mut().expect("initialised"));
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.ng(a) {
                    let ga = g.matmul_nt(self.value(b));
                    self.acc(grads, a, |m| m.add_assign(&ga));
                }
                if self.ng(b) {
                    let gb = self.value(a).matmul_tn(g);
                    self.acc(grads, b, |m| m.add_assign(&gb));
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.ng(a) {
                    let ga = g.matmul(self.value(b));
                    self.acc(grads, a, |m| m.add_assign(&ga));
                }
                if self.ng(b) {
                    let gb = g.matmul_tn(self.value(a));
                    self.acc(grads, b, |m| m.add_assign(&gb));
                }
            }
            &Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc(grads, a, |m| m.add_assign(&gt));
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |m| m.add_assign(g));
                self.acc(grads, b, |m| m.add_assign(g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |m| m.add_assign(g));
                self.acc(grads, b, |m| {
                    for (o, gv) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o -= gv;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |m| m.add_assign(&g.zip_map(bv, |x, y| x * y)));
                self.acc(grads, b, |m| m.add_assign(&g.zip_map(av, |x, y| x * y)));
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, |m| m.add_assign(g));
                self.acc(grads, row, |m| {
                    let s = g.col_sums();
                    axpy(1.0, &s, m.row_mut(0));
                });
            }
            &Op::MulRow(a, row) => {
                let (av, rv) = (self.value(a), self.value(row));
                self.acc(grads, a, |m| {
                    for i in 0..g.rows() {
                        for ((o, gv), w) in m.row_mut(i).iter_mut().zip(g.row(i)).zip(rv.row(0)) {
                            *o += gv * w;
                        }
                    }
                });
                self.acc(grads, row, |m| {
                    let out = m.row_mut(0);
                    for i in 0..g.rows() {
                        for ((o, gv), x) in out.iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *o += gv * x;
                        }
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.acc(grads, a, |m| axpy(c, g.as_slice(), m.as_mut_slice()));
            }
            &Op::AddScalar(a) => {
                self.acc(grads, a, |m| m.add_assign(g));
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                self.acc(grads, a, |m| {
                    m.add_assign(&g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
                });
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                self.acc(grads, a, |m| m.add_assign(&g.zip_map(x, |gv, xv| gv * gelu_grad(xv))));
            }
            &Op::Tanh(a) => {
                self.acc(grads, a, |m| m.add_assign(&g.zip_map(y, |gv, t| gv * (1.0 - t * t))));
            }
            &Op::Softplus(a) => {
                let x = self.value(a);
                self.acc(grads, a, |m| m.add_assign(&g.zip_map(x, |gv, xv| gv * sigmoid(xv))));
            }
            &Op::Ln(a) => {
                let x = self.value(a);
                self.acc(grads, a, |m| m.add_assign(&g.zip_map(x, |gv, xv| gv / xv)));
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.value(a);
                self.acc(grads, a, |m| {
                    m.add_assign(&g.zip_map(x, |gv, xv| if xv > lo && xv < hi { gv } else { 0.0 }))
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let cols = y.cols() as f64;
                self.acc(grads, *x, |m| {
                    for i in 0..y.rows() {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let mean_g = gr.iter().sum::<f64>() / cols;
                        let mean_gy = dot(gr, yr) / cols;
                        for ((o, gv), yv) in m.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o += inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::RowNormalize { x, norms } => {
                self.acc(grads, *x, |m| {
                    for i in 0..y.rows() {
                        let n = norms[i];
                        if n == 0.0 {
                            continue;
                        }
                        let (gr, yr) = (g.row(i), y.row(i));
                        let proj = dot(gr, yr);
                        for ((o, gv), yv) in m.row_mut(i).iter_mut().zip(gr).zip(yr) {
                            *o += (gv - yv * proj) / n;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).rows();
                    let gp = g.slice_rows(start, len);
                    self.acc(grads, p, |m| m.add_assign(&gp));
                    start += len;
                }
            }
            &Op::SliceRows(a, start) => {
                self.acc(grads, a, |m| {
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), m.row_mut(start + r));
                    }
                });
            }
            &Op::ShiftRows(a, offset) => {
                self.acc(grads, a, |m| {
                    let rows = g.rows();
                    for t in 0..rows {
                        let src = t as isize + offset;
                        if src >= 0 && (src as usize) < rows {
                            axpy(1.0, g.row(t), m.row_mut(src as usize));
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc(grads, *a, |m| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, g.row(r), m.row_mut(i));
                    }
                });
            }
            &Op::Ema(a, decay) => {
                self.acc(grads, a, |m| {
                    let cols = g.cols();
                    let mut carry = vec![0.0; cols];
                    for t in (0..g.rows()).rev() {
                        for (c, gv) in carry.iter_mut().zip(g.row(t)) {
                            *c = gv + decay * *c;
                        }
                        axpy(1.0 - decay, &carry, m.row_mut(t));
                    }
                });
            }
            Op::WindowMax { x, argmax } => {
                self.acc(grads, *x, |m| {
                    let cols = g.cols();
                    for w in 0..g.rows() {
                        for c in 0..cols {
                            let r = argmax[w * cols + c];
                            let cur = m.get(r, c);
                            m.set(r, c, cur + g.get(w, c));
                        }
                    }
                });
            }
            Op::ProposalInit { x, argmax, side } => {
                let side = *side;
                self.acc(grads, *x, |m| {
                    let cols = g.cols();
                    for i in 0..side {
                        for j in i..side {
                            let cell = i * side + j;
                            let gr = g.row(cell);
                            axpy(1.0, gr, m.row_mut(i));
                            axpy(1.0, gr, m.row_mut(j));
                            for (c, &gv) in gr.iter().enumerate() {
                                let r = argmax[cell * cols + c];
                                let cur = m.get(r, c);
                                m.set(r, c, cur + gv);
                            }
                        }
                    }
                });
            }
            &Op::Conv2dMasked { x, w, b, side } => {
                let xm = self.value(x);
                let wm = self.value(w);
                let cin = xm.cols();
                if self.ng(b) {
                    self.acc(grads, b, |m| {
                        let out = m.row_mut(0);
                        for i in 0..side {
                            for j in i..side {
                                axpy(1.0, g.row(i * side + j), out);
                            }
                        }
                    });
                }
                if self.ng(w) {
                    self.acc(grads, w, |m| {
                        for i in 0..side {
                            for j in i..side {
                                let gr = g.row(i * side + j);
                                for_each_neighbor(i, j, side, |k, n| {
                                    for (ci, &xv) in xm.row(n).iter().enumerate() {
                                        if xv != 0.0 {
                                            axpy(xv, gr, m.row_mut(k * cin + ci));
                                        }
                                    }
                                });
                            }
                        }
                    });
                }
                if self.ng(x) {
                    self.acc(grads, x, |m| {
                        for i in 0..side {
                            for j in i..side {
                                let gr = g.row(i * side + j);
                                for_each_neighbor(i, j, side, |k, n| {
                                    let dst = m.row_mut(n);
                                    for (ci, d) in dst.iter_mut().enumerate() {
                                        *d += dot(wm.row(k * cin + ci), gr);
                                    }
                                });
                            }
                        }
                    });
                }
            }
            Op::WeightedSum(a, weights) => {
                let s = g.get(0, 0);
                self.acc(grads, *a, |m| axpy(s, weights.as_slice(), m.as_mut_slice()));
            }
            &Op::Sum(a) => {
                let s = g.get(0, 0);
                self.acc(grads, a, |m| m.as_mut_slice().iter_mut().for_each(|e| *e += s));
            }
            &Op::LogSoftmaxRows(a) => {
                self.acc(grads, a, |m| {
                    for i in 0..y.rows() {
                        let gr = g.row(i);
                        let gsum: f64 = gr.iter().sum();
                        for ((o, gv), yv) in m.row_mut(i).iter_mut().zip(gr).zip(y.row(i)) {
                            *o += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
        }
    }
}

/// Visits the valid 3x3 neighbours of cell `(i, j)` as `(kernel_offset, cell_index)`.
#[inline]
fn for_each_neighbor(i: usize, j: usize, side: usize, mut f: impl FnMut(usize, usize)) {
    for di in -1isize..=1 {
        let ni = i as isize + di;
        if ni < 0 || ni >= side as isize {
            continue;
        }
        for dj in -1isize..=1 {
            let nj = j as isize + dj;
            if nj < 0 || nj >= side as isize || !cell_valid(ni as usize, nj as usize) {
                continue;
            }
            let k = ((di + 1) * 3 + (dj + 1)) as usize;
            f(k, ni as usize * side + nj as usize);
        }
    }
}
