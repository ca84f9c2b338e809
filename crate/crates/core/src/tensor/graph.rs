//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! The primitive set is closed: every node is one of the [`Op`] variants, so
//! a loss built from anything else cannot be constructed. Shape mismatches
//! are programming errors and panic at construction time.

use super::{Grads, Matrix, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Gelu { x: Var, t: Matrix },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Exp(Var),
    Square(Var),
    Expectile(Var, f64),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    ColumnBilinear { a: Var, b: Var, p: usize },
    Concat(Vec<Var>),
    Gather { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Matrix,
    op: Op,
    grad: bool,
}

/// A computation tape. Build a scalar loss, call [`Graph::backward`], then
/// read parameter gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    store_len: usize,
    /// Per expectile node, which entries took the negative branch.
    branches: Vec<Vec<bool>>,
    replay: Option<Vec<Vec<bool>>>,
}

/// `exp` on `[-40, 40]`: round-to-nearest range reduction by `ln 2` and a
/// degree-12 Taylor polynomial. Branch-free so activation loops vectorize;
/// relative error stays within a few ulps.
#[inline(always)]
fn exp_bounded(x: f64) -> f64 {
    const MAGIC: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-01;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let y = x * std::f64::consts::LOG2_E + MAGIC;
    let k = y - MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // the low mantissa bits of `y` hold `k` in two's complement
    let scale = f64::from_bits((y.to_bits() << 52).wrapping_add(1023 << 52));
    p * scale
}

/// `tanh` through one bounded `exp`; `|u| >= 20` saturates to within an ulp of 1.
#[inline(always)]
fn tanh(u: f64) -> f64 {
    let e = exp_bounded(2.0 * u.clamp(-20.0, 20.0));
    (e - 1.0) / (e + 1.0)
}

#[inline(always)]
fn gelu_tanh(x: f64) -> f64 {
    tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x))
}

#[inline(always)]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// Derivative of [`gelu`] given `t = tanh(...)` from the forward pass.
#[inline(always)]
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// `|iota - 1{x < 0}| * x^2`; the tie at zero takes the nonnegative branch.
#[inline]
pub fn expectile(x: f64, iota: f64) -> f64 {
    expectile_weight(x, iota) * x * x
}

#[inline]
fn expectile_weight(x: f64, iota: f64) -> f64 {
    if x < 0.0 {
        1.0 - iota
    } else {
        iota
    }
}

/// Layer normalization of each row; returns `(y, xhat, inv_std)`.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (n, m) = x.shape();
    let mut xhat = Matrix::zeros(n, m);
    let mut y = Matrix::zeros(n, m);
    let mut inv = vec![0.0; n];
    layer_norm_rows(x.data(), m, gain, bias, xhat.data_mut(), y.data_mut(), &mut inv);
    (y, xhat, inv)
}

/// Compiles a kernel for the baseline target and again with AVX2 enabled,
/// picking one at run time. Both builds perform the same IEEE operations in
/// the same order (no contraction, no reassociation), so outputs are
/// bit-identical.
macro_rules! multiversion {
    ($(fn $name:ident($($arg:ident: $ty:ty),* $(,)?) $body:block)*) => {$(
        fn $name($($arg: $ty),*) {
            #[inline(always)]
            fn body($($arg: $ty),*) $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn avx2($($arg: $ty),*) {
                    body($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the required feature was detected at run time.
                    return unsafe { avx2($($arg),*) };
                }
            }
            body($($arg),*)
        }
    )*};
}

multiversion! {
    fn layer_norm_rows(x: &[f64], m: usize, gain: &[f64], bias: &[f64], xhat: &mut [f64], y: &mut [f64], inv: &mut [f64]) {
        for (r, is_out) in inv.iter_mut().enumerate() {
            let row = &x[r * m..(r + 1) * m];
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            *is_out = is;
            let xh = &mut xhat[r * m..(r + 1) * m];
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
            for (((o, h), g), b) in y[r * m..(r + 1) * m].iter_mut().zip(&*xh).zip(gain).zip(bias) {
                *o = h * g + b;
            }
        }
    }

    fn gelu_forward(x: &[f64], t: &mut [f64], y: &mut [f64]) {
        for ((v, t), y) in x.iter().zip(t).zip(y) {
            let tv = gelu_tanh(*v);
            *t = tv;
            *y = 0.5 * v * (1.0 + tv);
        }
    }

    fn gelu_in_place(x: &mut [f64]) {
        for v in x {
            *v = gelu(*v);
        }
    }

    fn gelu_backward(dy: &[f64], x: &[f64], t: &[f64], dx: &mut [f64]) {
        for (((o, d), v), t) in dx.iter_mut().zip(dy).zip(x).zip(t) {
            *o = d * gelu_grad(*v, *t);
        }
    }
}

/// GELU applied to every entry.
pub(crate) fn gelu_matrix(mut x: Matrix) -> Matrix {
    gelu_in_place(x.data_mut());
    x
}

/// `out[n, i] = sum_j a[n, j*p + i] * b[n, j*p + i]`: inner products of the
/// matching columns of two row-flattened `q x p` matrices.
pub fn column_bilinear(a: &Matrix, b: &Matrix, p: usize) -> Matrix {
    assert_eq!(a.shape(), b.shape(), "column_bilinear shape mismatch");
    assert!(p > 0 && a.cols() % p == 0, "column_bilinear width not divisible by p");
    let q = a.cols() / p;
    let mut out = Matrix::zeros(a.rows(), p);
    for r in 0..a.rows() {
        let (ar, br) = (a.row(r), b.row(r));
        let o = out.row_mut(r);
        for j in 0..q {
            for i in 0..p {
                o[i] += ar[j * p + i] * br[j * p + i];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose expectile nodes reuse the branch choices recorded by an
    /// earlier tape of the same loss, making the loss smooth around that point.
    pub fn replaying(branches: Vec<Vec<bool>>) -> Self {
        Graph {
            replay: Some(branches),
            ..Self::default()
        }
    }

    /// Branch choices of the expectile nodes built so far.
    pub fn branches(&self) -> &[Vec<bool>] {
        &self.branches
    }

    fn push(&mut self, value: Matrix, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Trainable parameter bound from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.store_len = self.store_len.max(store.len());
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((v, id));
        v
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols(), wv.rows(), "linear input width mismatch");
        assert_eq!(bv.shape(), (1, wv.cols()), "linear bias shape mismatch");
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.data());
        }
        super::matrix::gemm(1.0, xv, false, wv, false, 1.0, &mut out);
        let grad = self.g(x) || self.g(w) || self.g(b);
        self.push(out, Op::Linear { x, w, b }, grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::MatMul(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::Mul(a, b), grad)
    }

    /// `x + row` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.shape(), (1, xv.cols()), "add_row shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let grad = self.g(x) || self.g(row);
        self.push(out, Op::AddRow(x, row), grad)
    }

    /// `x * col` with the `n x 1` column broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert_eq!(cv.shape(), (xv.rows(), 1), "mul_col shape mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let c = cv.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= c);
        }
        let grad = self.g(x) || self.g(col);
        self.push(out, Op::MulCol(x, col), grad)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let grad = self.g(x);
        self.push(out, Op::Scale(x, c), grad)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let grad = self.g(x);
        self.push(out, Op::Offset(x), grad)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).shape();
        let mut t = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        gelu_forward(self.value(x).data(), t.data_mut(), out.data_mut());
        let grad = self.g(x);
        self.push(out, Op::Gelu { x, t }, grad)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (y, xhat, inv_std) = layer_norm(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let grad = self.g(x) || self.g(gain) || self.g(bias);
        self.push(y, Op::LayerNorm { x, gain, bias, xhat, inv_std }, grad)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let grad = self.g(x);
        self.push(out, Op::Exp(x), grad)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let grad = self.g(x);
        self.push(out, Op::Square(x), grad)
    }

    /// Elementwise expectile loss.
    pub fn expectile(&mut self, x: Var, iota: f64) -> Var {
        let xv = self.value(x);
        let neg: Vec<bool> = match self.replay.as_ref().and_then(|r| r.get(self.branches.len())) {
            Some(b) => b.clone(),
            None => xv.data().iter().map(|&v| v < 0.0).collect(),
        };
        let data = xv
            .data()
            .iter()
            .zip(&neg)
            .map(|(&v, &n)| if n { (1.0 - iota) * v * v } else { iota * v * v })
            .collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.branches.push(neg);
        let grad = self.g(x);
        self.push(out, Op::Expectile(x, iota), grad)
    }

    /// `n x m -> n x 1` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Matrix::column((0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect());
        let grad = self.g(x);
        self.push(out, Op::SumRows(x), grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let grad = self.g(x);
        self.push(out, Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Matrix::scalar(xv.sum() / xv.data().len() as f64);
        let grad = self.g(x);
        self.push(out, Op::Mean(x), grad)
    }

    /// Per-row inner products, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dot shape mismatch");
        let out = Matrix::column(
            (0..av.rows())
                .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(x, y)| x * y).sum())
                .collect(),
        );
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::RowDot(a, b), grad)
    }

    /// See [`column_bilinear`].
    pub fn column_bilinear(&mut self, a: Var, b: Var, p: usize) -> Var {
        let out = column_bilinear(self.value(a), self.value(b), p);
        let grad = self.g(a) || self.g(b);
        self.push(out, Op::ColumnBilinear { a, b, p }, grad)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let grad = parts.iter().any(|&p| self.g(p));
        self.push(out, Op::Concat(parts.to_vec()), grad)
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).gather_rows(idx);
        let grad = self.g(x);
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, grad)
    }

    /// Backpropagates from a scalar and returns gradients for every bound
    /// parameter (summed over repeated bindings).
    ///
    /// # Panics
    /// If `loss` is not 1x1.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut out = Grads::empty(self.store_len);
        for &(v, id) in &self.params {
            if let Some(g) = grads[v.0].take() {
                out.accumulate(id, g);
            }
        }
        out
    }

    fn propagate(&self, i: usize, dy: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, g: Matrix| {
            if self.nodes[v.0].grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.g(*x) {
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    super::matrix::gemm(1.0, dy, false, wv, true, 0.0, &mut dx);
                    send(*x, dx);
                }
                if self.g(*w) {
                    let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                    super::matrix::gemm(1.0, xv, true, dy, false, 0.0, &mut dw);
                    send(*w, dw);
                }
                if self.g(*b) {
                    send(*b, dy.col_sums());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.g(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    super::matrix::gemm(1.0, dy, false, bv, true, 0.0, &mut da);
                    send(*a, da);
                }
                if self.g(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    super::matrix::gemm(1.0, av, true, dy, false, 0.0, &mut db);
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.g(*a) {
                    send(*a, dy.zip_map(bv, |d, y| d * y));
                }
                if self.g(*b) {
                    send(*b, dy.zip_map(av, |d, x| d * x));
                }
            }
            Op::AddRow(x, row) => {
                send(*x, dy.clone());
                if self.g(*row) {
                    send(*row, dy.col_sums());
                }
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                if self.g(*x) {
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        let c = cv.data()[r];
                        dx.row_mut(r).iter_mut().for_each(|v| *v *= c);
                    }
                    send(*x, dx);
                }
                if self.g(*col) {
                    let dc = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(dy.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    send(*col, Matrix::column(dc));
                }
            }
            Op::Scale(x, c) => send(*x, dy.map(|v| v * c)),
            Op::Offset(x) => send(*x, dy.clone()),
            Op::Gelu { x, t } => {
                let mut dx = Matrix::zeros(dy.rows(), dy.cols());
                gelu_backward(dy.data(), self.value(*x).data(), t.data(), dx.data_mut());
                send(*x, dx)
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let (n, m) = xhat.shape();
                if self.g(*x) {
                    let mut dx = Matrix::zeros(n, m);
                    let mut dxh = vec![0.0; m];
                    for r in 0..n {
                        let (d, xh) = (dy.row(r), xhat.row(r));
                        for j in 0..m {
                            dxh[j] = d[j] * gv[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / m as f64;
                        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (m as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    send(*x, dx);
                }
                if self.g(*gain) {
                    send(*gain, dy.zip_map(xhat, |d, h| d * h).col_sums());
                }
                if self.g(*bias) {
                    send(*bias, dy.col_sums());
                }
            }
            Op::Exp(x) => send(*x, dy.zip_map(&node.value, |d, e| d * e)),
            Op::Square(x) => send(*x, dy.zip_map(self.value(*x), |d, v| 2.0 * d * v)),
            Op::Expectile(x, iota) => send(
                *x,
                dy.zip_map(self.value(*x), |d, v| 2.0 * d * expectile_weight(v, *iota) * v),
            ),
            Op::SumRows(x) => {
                let cols = self.value(*x).cols();
                let mut dx = Matrix::zeros(dy.rows(), cols);
                for r in 0..dy.rows() {
                    let d = dy.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|v| *v = d);
                }
                send(*x, dx);
            }
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                send(*x, Matrix::filled(r, c, dy.item()));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                send(*x, Matrix::filled(r, c, dy.item() / (r * c) as f64));
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let spread = |other: &Matrix| {
                    let mut out = other.clone();
                    for r in 0..out.rows() {
                        let d = dy.data()[r];
                        out.row_mut(r).iter_mut().for_each(|v| *v *= d);
                    }
                    out
                };
                if self.g(*a) {
                    send(*a, spread(bv));
                }
                if self.g(*b) {
                    send(*b, spread(av));
                }
            }
            Op::ColumnBilinear { a, b, p } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let p = *p;
                let bilinear_grad = |other: &Matrix| {
                    let mut out = Matrix::zeros(other.rows(), other.cols());
                    for r in 0..out.rows() {
                        let d = dy.row(r);
                        let o = other.row(r);
                        for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                            *v = d[k % p] * o[k];
                        }
                    }
                    out
                };
                if self.g(*a) {
                    send(*a, bilinear_grad(bv));
                }
                if self.g(*b) {
                    send(*b, bilinear_grad(av));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.g(p) {
                        let mut dp = Matrix::zeros(dy.rows(), c);
                        for r in 0..dy.rows() {
                            dp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + c]);
                        }
                        send(p, dp);
                    }
                    off += c;
                }
            }
            Op::Gather { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (o, &src) in idx.iter().enumerate() {
                    for (a, b) in dx.row_mut(src).iter_mut().zip(dy.row(o)) {
                        *a += b;
                    }
                }
                send(*x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_exp_and_tanh_match_libm() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01 + 0.003;
            let rel = (exp_bounded(x) - x.exp()).abs() / x.exp();
            assert!(rel <= 4.0 * f64::EPSILON, "exp({x}): {rel}");
            let u = x / 1.5;
            assert!((tanh(u) - u.tanh()).abs() <= 4.0 * f64::EPSILON, "tanh({u})");
        }
        assert_eq!(tanh(1e6), 1.0);
        assert_eq!(tanh(-1e6), -1.0);
        assert_eq!(tanh(0.0), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::scalar(3.0));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.mul(xv, xv);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::scalar(3.0));
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let y = g.square(xv);
        let y = g.detach(y);
        let z = g.scale(y, 2.0);
        let z = g.sum(z);
        let grads = g.backward(z);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn expectile_values() {
        assert!((expectile(-2.0, 0.7) - 1.2).abs() < 1e-12);
        assert!((expectile(2.0, 0.7) - 2.8).abs() < 1e-12);
        assert_eq!(expectile(0.0, 0.3), 0.0);
    }

    #[test]
    fn column_bilinear_matches_definition() {
        // 2 x 3 matrices flattened row-major; columns are length-2 vectors
        let a = Matrix::from_vec(1, 6, vec![1., 2., 3., 4., 5., 6.]);
        let b = Matrix::from_vec(1, 6, vec![1., 1., 1., 2., 2., 2.]);
        let f = column_bilinear(&a, &b, 3);
        assert_eq!(f.data(), &[1. + 8., 2. + 10., 3. + 12.]);
    }
}
