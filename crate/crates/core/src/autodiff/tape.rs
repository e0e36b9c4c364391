use std::cell::RefCell;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Elementwise functions with a defined adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Softplus,
    Sinh,
    Cosh,
    Asinh,
    Tanh,
    Atanh,
    Erf,
    Square,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Sigmoid,
    LogNdtr,
    /// Piecewise constant; zero adjoint.
    Sign,
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    /// Column-major map from entries to parameter slots; `None` entries are structural zeros.
    Param(Vec<Option<usize>>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    PowConst(usize, f64),
    Unary(usize, Unary),
    MatMul(usize, usize),
    Transpose(usize),
    Cholesky(usize),
    /// Solves `L X = B`.
    SolveLower(usize, usize),
    /// Solves `L^T X = B`.
    SolveLowerT(usize, usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Broadcast(usize),
    Rows(usize, Vec<usize>),
    Cols(usize, Vec<usize>),
    Diag(usize),
    LogSumExp(usize),
    VStack(usize, usize),
    ClampMin(usize, f64),
}

struct Node {
    op: Op,
    value: Mat,
}

struct Inner {
    nodes: Vec<Node>,
    params: Vec<f64>,
    error: Option<Error>,
    loss: Option<usize>,
}

/// A define-by-run record of matrix operations over a flat parameter vector.
///
/// Values are computed eagerly as operations are recorded; the first
/// non-finite or failed node is remembered and reported by [`Tape::set_loss`].
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

fn zip_broadcast(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape()).expect("shapes checked at record time");
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (xs, ys) = (a.as_slice(), b.as_slice());
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        let xa = &xs[if ac == 1 { 0 } else { j * ar }..][..ar];
        let yb = &ys[if bc == 1 { 0 } else { j * br }..][..br];
        match (ar == 1, br == 1) {
            (false, false) => out.extend(xa.iter().zip(yb).map(|(x, y)| f(*x, *y))),
            (true, false) => out.extend(yb.iter().map(|y| f(xa[0], *y))),
            (false, true) => out.extend(xa.iter().map(|x| f(*x, yb[0]))),
            (true, true) => out.extend(std::iter::repeat_n(f(xa[0], yb[0]), r)),
        }
    }
    Mat::from_vec(r, c, out)
}

/// Branch-free scan so the check vectorizes.
fn all_finite(v: &[f64]) -> bool {
    const EXP: u64 = 0x7ff0_0000_0000_0000;
    v.iter().fold(0u64, |acc, x| acc | u64::from(x.to_bits() & EXP == EXP)) == 0
}

/// Sums a broadcast adjoint back down to `shape`.
fn reduce_to(g: Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g;
    }
    let mut out = g;
    if shape.0 == 1 && out.nrows() != 1 {
        out = Mat::from_fn(1, out.ncols(), |_, j| out.column(j).sum());
    }
    if shape.1 == 1 && out.ncols() != 1 {
        let mut col = out.columns(0, 1).into_owned();
        for j in 1..out.ncols() {
            col += out.columns(j, 1);
        }
        out = col;
    }
    out
}

fn expand(v: &Mat, shape: (usize, usize)) -> Mat {
    if v.shape() == shape {
        return v.clone();
    }
    let (vr, vc) = v.shape();
    Mat::from_fn(shape.0, shape.1, |i, j| v[(if vr == 1 { 0 } else { i }, if vc == 1 { 0 } else { j })])
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// log of the standard normal CDF, accurate far into the lower tail.
pub(crate) fn log_ndtr(x: f64) -> f64 {
    if x > -37.0 {
        (0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        // asymptotic series of the Mills ratio
        let x2 = x * x;
        let u = 1.0 / x2;
        let series = 1.0 - u * (1.0 - 3.0 * u * (1.0 - 5.0 * u * (1.0 - 7.0 * u * (1.0 - 9.0 * u))));
        -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + series.ln()
    }
}

fn unary_value(op: Unary, x: f64) -> f64 {
    match op {
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Softplus => softplus(x),
        Unary::Sinh => x.sinh(),
        Unary::Cosh => x.cosh(),
        Unary::Asinh => x.asinh(),
        Unary::Tanh => x.tanh(),
        Unary::Atanh => x.atanh(),
        Unary::Erf => libm::erf(x),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Sigmoid => sigmoid(x),
        Unary::LogNdtr => log_ndtr(x),
        Unary::Sign => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// d op / dx given input `x` and output `y`.
fn unary_deriv(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Softplus => sigmoid(x),
        Unary::Sinh => x.cosh(),
        Unary::Cosh => x.sinh(),
        Unary::Asinh => 1.0 / (1.0 + x * x).sqrt(),
        Unary::Tanh => 1.0 - y * y,
        Unary::Atanh => 1.0 / (1.0 - x * x),
        Unary::Erf => std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp(),
        Unary::Square => 2.0 * x,
        Unary::Sqrt => 0.5 / y,
        Unary::Abs => unary_value(Unary::Sign, x),
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Sigmoid => y * (1.0 - y),
        Unary::LogNdtr => (-0.5 * x * x - LN_SQRT_2PI - y).exp(),
        Unary::Sign => 0.0,
    }
}

fn lower_tri(m: &Mat) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| if i >= j { m[(i, j)] } else { 0.0 })
}

fn nan_matrix(r: usize, c: usize) -> Mat {
    Mat::from_element(r, c, f64::NAN)
}

impl Tape {
    pub fn new(params: &[f64]) -> Tape {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::with_capacity(256),
                params: params.to_vec(),
                error: None,
                loss: None,
            }),
        }
    }

    pub fn num_params(&self) -> usize {
        self.inner.borrow().params.len()
    }

    pub fn params(&self) -> Vec<f64> {
        self.inner.borrow().params.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First error recorded so far.
    pub fn error(&self) -> Option<Error> {
        self.inner.borrow().error.clone()
    }

    pub(crate) fn fail(&self, e: Error) {
        let mut inner = self.inner.borrow_mut();
        if inner.error.is_none() {
            inner.error = Some(e);
        }
    }

    fn push(&self, op: Op, value: Mat) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.error.is_none() && !all_finite(value.as_slice()) {
            inner.error = Some(Error::NonFiniteValue { node: id, term: None });
        }
        inner.nodes.push(Node { op, value });
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(Op::Const, value)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, v))
    }

    /// A `rows x cols` block read row-major from the parameter vector at `offset`.
    pub fn param(&self, offset: usize, rows: usize, cols: usize) -> Var<'_> {
        let index = (0..rows * cols).map(|k| Some(offset + k)).collect();
        self.param_gather(rows, cols, index)
    }

    /// A matrix whose row-major entries are drawn from parameter slots (`None` = 0).
    pub fn param_gather(&self, rows: usize, cols: usize, row_major: Vec<Option<usize>>) -> Var<'_> {
        assert_eq!(row_major.len(), rows * cols, "gather index length");
        let n = self.num_params();
        let mut col_major = vec![None; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let slot = row_major[i * cols + j];
                if let Some(s) = slot {
                    assert!(s < n, "parameter slot {s} out of range {n}");
                }
                col_major[j * rows + i] = slot;
            }
        }
        let value = {
            let inner = self.inner.borrow();
            Mat::from_iterator(rows, cols, col_major.iter().map(|s| s.map_or(0.0, |k| inner.params[k])))
        };
        self.push(Op::Param(col_major), value)
    }

    pub(crate) fn value_of(&self, id: usize) -> Mat {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn shape_of(&self, id: usize) -> (usize, usize) {
        self.inner.borrow().nodes[id].value.shape()
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&Mat) -> R) -> R {
        f(&self.inner.borrow().nodes[id].value)
    }

    fn binary(&self, a: usize, b: usize, make: fn(usize, usize) -> Op, f: fn(f64, f64) -> f64) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[a].value, &inner.nodes[b].value);
            assert!(
                broadcast_shape(x.shape(), y.shape()).is_some(),
                "incompatible shapes {:?} and {:?}",
                x.shape(),
                y.shape()
            );
            zip_broadcast(x, y, f)
        };
        self.push(make(a, b), value)
    }

    fn map(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let value = self.with_value(a, |x| x.map(f));
        self.push(op, value)
    }

    pub(crate) fn add(&self, a: usize, b: usize) -> Var<'_> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }
    pub(crate) fn sub(&self, a: usize, b: usize) -> Var<'_> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }
    pub(crate) fn mul(&self, a: usize, b: usize) -> Var<'_> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }
    pub(crate) fn div(&self, a: usize, b: usize) -> Var<'_> {
        self.binary(a, b, Op::Div, |x, y| x / y)
    }
    pub(crate) fn neg(&self, a: usize) -> Var<'_> {
        self.map(a, Op::Neg(a), |x| -x)
    }
    pub(crate) fn scale(&self, a: usize, k: f64) -> Var<'_> {
        self.map(a, Op::Scale(a, k), |x| x * k)
    }
    pub(crate) fn shift(&self, a: usize, k: f64) -> Var<'_> {
        self.map(a, Op::Shift(a), |x| x + k)
    }
    pub(crate) fn powf(&self, a: usize, p: f64) -> Var<'_> {
        self.map(a, Op::PowConst(a, p), |x| x.powf(p))
    }
    pub(crate) fn unary(&self, a: usize, op: Unary) -> Var<'_> {
        self.map(a, Op::Unary(a, op), |x| unary_value(op, x))
    }
    pub(crate) fn clamp_min(&self, a: usize, lo: f64) -> Var<'_> {
        self.map(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    pub(crate) fn matmul(&self, a: usize, b: usize) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[a].value, &inner.nodes[b].value);
            assert_eq!(x.ncols(), y.nrows(), "matmul shapes {:?} x {:?}", x.shape(), y.shape());
            x * y
        };
        self.push(Op::MatMul(a, b), value)
    }

    pub(crate) fn transpose(&self, a: usize) -> Var<'_> {
        let value = self.with_value(a, |x| x.transpose());
        self.push(Op::Transpose(a), value)
    }

    pub(crate) fn cholesky(&self, a: usize) -> Var<'_> {
        let (value, ok) = self.with_value(a, |x| {
            assert_eq!(x.nrows(), x.ncols(), "cholesky of non-square matrix");
            match x.clone().cholesky() {
                Some(c) => (c.unpack(), true),
                None => (nan_matrix(x.nrows(), x.ncols()), false),
            }
        });
        if !ok {
            let id = self.len();
            self.fail(Error::NotPositiveDefinite { node: Some(id), jitter: 0.0 });
        }
        self.push(Op::Cholesky(a), value)
    }

    pub(crate) fn solve_lower(&self, l: usize, b: usize, transpose: bool) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            let (lv, bv) = (&inner.nodes[l].value, &inner.nodes[b].value);
            assert_eq!(lv.nrows(), bv.nrows(), "triangular solve shapes");
            let out = if transpose { lv.tr_solve_lower_triangular(bv) } else { lv.solve_lower_triangular(bv) };
            out.unwrap_or_else(|| nan_matrix(bv.nrows(), bv.ncols()))
        };
        let op = if transpose { Op::SolveLowerT(l, b) } else { Op::SolveLower(l, b) };
        self.push(op, value)
    }

    pub(crate) fn sum(&self, a: usize) -> Var<'_> {
        let value = self.with_value(a, |x| Mat::from_element(1, 1, x.sum()));
        self.push(Op::Sum(a), value)
    }

    pub(crate) fn sum_rows(&self, a: usize) -> Var<'_> {
        let value = self.with_value(a, |x| Mat::from_fn(x.nrows(), 1, |i, _| x.row(i).sum()));
        self.push(Op::SumRows(a), value)
    }

    pub(crate) fn sum_cols(&self, a: usize) -> Var<'_> {
        let value = self.with_value(a, |x| Mat::from_fn(1, x.ncols(), |_, j| x.column(j).sum()));
        self.push(Op::SumCols(a), value)
    }

    pub(crate) fn broadcast(&self, a: usize, rows: usize, cols: usize) -> Var<'_> {
        let value = self.with_value(a, |x| {
            assert!(
                broadcast_shape(x.shape(), (rows, cols)) == Some((rows, cols)),
                "cannot broadcast {:?} to {:?}",
                x.shape(),
                (rows, cols)
            );
            expand(x, (rows, cols))
        });
        self.push(Op::Broadcast(a), value)
    }

    pub(crate) fn rows(&self, a: usize, idx: Vec<usize>) -> Var<'_> {
        let value = self.with_value(a, |x| Mat::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]));
        self.push(Op::Rows(a, idx), value)
    }

    pub(crate) fn cols(&self, a: usize, idx: Vec<usize>) -> Var<'_> {
        let value = self.with_value(a, |x| Mat::from_fn(x.nrows(), idx.len(), |i, j| x[(i, idx[j])]));
        self.push(Op::Cols(a, idx), value)
    }

    pub(crate) fn diag(&self, a: usize) -> Var<'_> {
        let value = self.with_value(a, |x| {
            let n = x.nrows().min(x.ncols());
            Mat::from_fn(n, 1, |i, _| x[(i, i)])
        });
        self.push(Op::Diag(a), value)
    }

    pub(crate) fn logsumexp(&self, a: usize) -> Var<'_> {
        let value = self.with_value(a, |x| Mat::from_element(1, 1, crate::numstats::logsumexp_slice(x.as_slice())));
        self.push(Op::LogSumExp(a), value)
    }

    pub(crate) fn vstack(&self, a: usize, b: usize) -> Var<'_> {
        let value = {
            let inner = self.inner.borrow();
            let (x, y) = (&inner.nodes[a].value, &inner.nodes[b].value);
            assert_eq!(x.ncols(), y.ncols(), "vstack column mismatch");
            let (ra, rb) = (x.nrows(), y.nrows());
            Mat::from_fn(ra + rb, x.ncols(), |i, j| if i < ra { x[(i, j)] } else { y[(i - ra, j)] })
        };
        self.push(Op::VStack(a, b), value)
    }

    /// Marks the scalar loss. Fails with the first error recorded on the tape.
    pub fn set_loss(&self, loss: Var<'_>) -> Result<f64> {
        if loss.shape() != (1, 1) {
            return Err(Error::Usage(format!("loss must be 1x1, got {:?}", loss.shape())));
        }
        let mut inner = self.inner.borrow_mut();
        if let Some(e) = &inner.error {
            return Err(e.clone());
        }
        inner.loss = Some(loss.id);
        Ok(inner.nodes[loss.id].value[(0, 0)])
    }

    /// Gradient of the marked loss with respect to every parameter slot.
    pub fn backward(&self) -> Result<Vec<f64>> {
        let inner = self.inner.borrow();
        if let Some(e) = &inner.error {
            return Err(e.clone());
        }
        let loss = inner
            .loss
            .ok_or_else(|| Error::Usage("backward called before a loss was marked by forward".into()))?;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Mat>> = vec![None; loss + 1];
        grads[loss] = Some(Mat::from_element(1, 1, 1.0));
        let mut out = vec![0.0; inner.params.len()];

        fn acc(grads: &mut [Option<Mat>], id: usize, g: Mat) {
            match &mut grads[id] {
                Some(existing) => *existing += g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let y = &node.value;
            match &node.op {
                Op::Const => {}
                Op::Param(index) => {
                    for (k, slot) in index.iter().enumerate() {
                        if let Some(s) = slot {
                            out[*s] += g.as_slice()[k];
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    acc(&mut grads, *a, reduce_to(g.clone(), sa));
                    acc(&mut grads, *b, reduce_to(g, sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    acc(&mut grads, *a, reduce_to(g.clone(), sa));
                    acc(&mut grads, *b, reduce_to(-g, sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = zip_broadcast(&g, vb, |g, v| g * v);
                    let gb = zip_broadcast(&g, va, |g, v| g * v);
                    acc(&mut grads, *a, reduce_to(ga, va.shape()));
                    acc(&mut grads, *b, reduce_to(gb, vb.shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = zip_broadcast(&g, vb, |g, v| g / v);
                    let gy = g.component_mul(y);
                    let gb = zip_broadcast(&gy, vb, |gy, v| -gy / v);
                    acc(&mut grads, *a, reduce_to(ga, va.shape()));
                    acc(&mut grads, *b, reduce_to(gb, vb.shape()));
                }
                Op::Neg(a) => acc(&mut grads, *a, -g),
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::PowConst(a, p) => {
                    let x = &nodes[*a].value;
                    let d = g.zip_map(x, |g, x| g * p * x.powf(p - 1.0));
                    acc(&mut grads, *a, d);
                }
                Op::Unary(a, op) => {
                    let x = &nodes[*a].value;
                    let mut d = g;
                    for ((d, &x), &y) in d.iter_mut().zip(x.iter()).zip(y.iter()) {
                        *d *= unary_deriv(*op, x, y);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ClampMin(a, lo) => {
                    let x = &nodes[*a].value;
                    let d = g.zip_map(x, |g, x| if x > *lo { g } else { 0.0 });
                    acc(&mut grads, *a, d);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, &g * vb.transpose());
                    acc(&mut grads, *b, va.transpose() * &g);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Cholesky(a) => {
                    // Abar = sym(L^-T Phi(L^T Lbar) L^-1), Phi = lower triangle with halved diagonal
                    let l = y;
                    let lbar = lower_tri(&g);
                    let mut p = lower_tri(&(l.transpose() * lbar));
                    for i in 0..p.nrows() {
                        p[(i, i)] *= 0.5;
                    }
                    let s1 = l.tr_solve_lower_triangular(&p).expect("cholesky factor is triangular nonsingular");
                    let s = l
                        .tr_solve_lower_triangular(&s1.transpose())
                        .expect("cholesky factor is triangular nonsingular")
                        .transpose();
                    let abar = (&s + s.transpose()) * 0.5;
                    acc(&mut grads, *a, abar);
                }
                Op::SolveLower(l, b) => {
                    // X = L^-1 B: Bbar = L^-T Xbar, Lbar = -tril(Bbar X^T)
                    let lv = &nodes[*l].value;
                    let bbar = lv.tr_solve_lower_triangular(&g).expect("nonsingular triangular factor");
                    let lbar = -lower_tri(&(&bbar * y.transpose()));
                    acc(&mut grads, *l, lbar);
                    acc(&mut grads, *b, bbar);
                }
                Op::SolveLowerT(l, b) => {
                    // X = L^-T B: Bbar = L^-1 Xbar, Lbar = -tril(X Bbar^T)
                    let lv = &nodes[*l].value;
                    let bbar = lv.solve_lower_triangular(&g).expect("nonsingular triangular factor");
                    let lbar = -lower_tri(&(y * bbar.transpose()));
                    acc(&mut grads, *l, lbar);
                    acc(&mut grads, *b, bbar);
                }
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut grads, *a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::SumRows(a) => {
                    let shape = nodes[*a].value.shape();
                    acc(&mut grads, *a, expand(&g, shape));
                }
                Op::SumCols(a) => {
                    let shape = nodes[*a].value.shape();
                    acc(&mut grads, *a, expand(&g, shape));
                }
                Op::Broadcast(a) => {
                    let shape = nodes[*a].value.shape();
                    acc(&mut grads, *a, reduce_to(g, shape));
                }
                Op::Rows(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut d = Mat::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            d[(src, j)] += g[(i, j)];
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Cols(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut d = Mat::zeros(r, c);
                    for (j, &src) in idx.iter().enumerate() {
                        for i in 0..r {
                            d[(i, src)] += g[(i, j)];
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Diag(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut d = Mat::zeros(r, c);
                    for i in 0..g.nrows() {
                        d[(i, i)] = g[(i, 0)];
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LogSumExp(a) => {
                    let x = &nodes[*a].value;
                    let lse = y[(0, 0)];
                    let d = x.map(|v| g[(0, 0)] * (v - lse).exp());
                    acc(&mut grads, *a, d);
                }
                Op::VStack(a, b) => {
                    let ra = nodes[*a].value.nrows();
                    let rb = nodes[*b].value.nrows();
                    acc(&mut grads, *a, g.rows(0, ra).into_owned());
                    acc(&mut grads, *b, g.rows(ra, rb).into_owned());
                }
            }
        }
        Ok(out)
    }
}
