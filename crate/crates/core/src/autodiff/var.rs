use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{Mat, Tape, Unary, Var};

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Mat {
        self.tape.value_of(self.id)
    }

    /// Value of a 1x1 node (or the first entry).
    pub fn item(&self) -> f64 {
        self.tape.with_value(self.id, |m| m[(0, 0)])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    pub fn nrows(&self) -> usize {
        self.shape().0
    }

    pub fn ncols(&self) -> usize {
        self.shape().1
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn unary(self, op: Unary) -> Var<'t> {
        self.tape.unary(self.id, op)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Ln)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }
    pub fn sinh(self) -> Var<'t> {
        self.unary(Unary::Sinh)
    }
    pub fn cosh(self) -> Var<'t> {
        self.unary(Unary::Cosh)
    }
    pub fn asinh(self) -> Var<'t> {
        self.unary(Unary::Asinh)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn atanh(self) -> Var<'t> {
        self.unary(Unary::Atanh)
    }
    pub fn erf(self) -> Var<'t> {
        self.unary(Unary::Erf)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }
    pub fn sin(self) -> Var<'t> {
        self.unary(Unary::Sin)
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(Unary::Cos)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn log_ndtr(self) -> Var<'t> {
        self.unary(Unary::LogNdtr)
    }
    pub fn sign(self) -> Var<'t> {
        self.unary(Unary::Sign)
    }
    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape.powf(self.id, p)
    }
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.tape.clamp_min(self.id, lo)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.matmul(self.id, rhs.id)
    }
    pub fn t(self) -> Var<'t> {
        self.tape.transpose(self.id)
    }
    /// Lower Cholesky factor.
    pub fn cholesky(self) -> Var<'t> {
        self.tape.cholesky(self.id)
    }
    /// `self^-1 rhs` for lower-triangular `self`.
    pub fn solve_lower(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.solve_lower(self.id, rhs.id, false)
    }
    /// `self^-T rhs` for lower-triangular `self`.
    pub fn solve_lower_t(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.solve_lower(self.id, rhs.id, true)
    }
    pub fn sum(self) -> Var<'t> {
        self.tape.sum(self.id)
    }
    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum() * (1.0 / (r * c) as f64)
    }
    /// Row sums as a column.
    pub fn sum_rows(self) -> Var<'t> {
        self.tape.sum_rows(self.id)
    }
    /// Column sums as a row.
    pub fn sum_cols(self) -> Var<'t> {
        self.tape.sum_cols(self.id)
    }
    pub fn broadcast_to(self, rows: usize, cols: usize) -> Var<'t> {
        self.tape.broadcast(self.id, rows, cols)
    }
    pub fn rows(self, idx: Vec<usize>) -> Var<'t> {
        self.tape.rows(self.id, idx)
    }
    pub fn cols(self, idx: Vec<usize>) -> Var<'t> {
        self.tape.cols(self.id, idx)
    }
    pub fn col(self, j: usize) -> Var<'t> {
        self.cols(vec![j])
    }
    pub fn diag(self) -> Var<'t> {
        self.tape.diag(self.id)
    }
    pub fn logsumexp(self) -> Var<'t> {
        self.tape.logsumexp(self.id)
    }
    pub fn vstack(self, below: Var<'t>) -> Var<'t> {
        self.same_tape(&below);
        self.tape.vstack(self.id, below.id)
    }
    /// log(cosh(x)) without overflow.
    pub fn log_cosh(self) -> Var<'t> {
        let a = self.abs();
        a + (a * -2.0).softplus() - std::f64::consts::LN_2
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.add(self.id, rhs.id)
    }
}
impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.sub(self.id, rhs.id)
    }
}
impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.mul(self.id, rhs.id)
    }
}
impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(&rhs);
        self.tape.div(self.id, rhs.id)
    }
}
impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.neg(self.id)
    }
}
impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, k: f64) -> Var<'t> {
        self.tape.shift(self.id, k)
    }
}
impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, k: f64) -> Var<'t> {
        self.tape.shift(self.id, -k)
    }
}
impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, k: f64) -> Var<'t> {
        self.tape.scale(self.id, k)
    }
}
impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, k: f64) -> Var<'t> {
        self.tape.scale(self.id, 1.0 / k)
    }
}
impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, v: Var<'t>) -> Var<'t> {
        v + self
    }
}
impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, v: Var<'t>) -> Var<'t> {
        -v + self
    }
}
impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, v: Var<'t>) -> Var<'t> {
        v * self
    }
}
