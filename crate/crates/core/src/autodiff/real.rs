use std::ops::{Add, Div, Mul, Neg, Sub};

use super::tape::{log_ndtr, sigmoid, softplus, Mat, Var};

/// Arithmetic shared by plain `f64` scalars and tape variables, so that
/// elementwise maps (flows, likelihoods) are written once and evaluated
/// either directly or on a [`super::Tape`].
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant living in the same context as `self`.
    fn lift(&self, v: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn softplus(self) -> Self;
    fn sinh(self) -> Self;
    fn cosh(self) -> Self;
    fn asinh(self) -> Self;
    fn tanh(self) -> Self;
    fn atanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn square(self) -> Self;
    fn abs(self) -> Self;
    fn sign(self) -> Self;
    fn sigmoid(self) -> Self;
    fn log_ndtr(self) -> Self;
    fn log_cosh(self) -> Self;
    fn powf(self, p: f64) -> Self;

    fn shape(&self) -> (usize, usize);
    /// Column-major values.
    fn values(&self) -> Vec<f64>;
    /// A constant (gradient-free) value in the same context.
    fn constant_like(&self, rows: usize, cols: usize, data: Vec<f64>) -> Self;

    fn min_value(&self) -> f64 {
        self.values().into_iter().fold(f64::INFINITY, f64::min)
    }
    fn max_value(&self) -> f64 {
        self.values().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
    /// `|x|^e` with a variable exponent, via `exp(e ln|x|)`.
    fn abs_pow(self, e: Self) -> Self {
        (e * self.abs().ln()).exp()
    }
}

impl Real for f64 {
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn sinh(self) -> Self {
        f64::sinh(self)
    }
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
    fn asinh(self) -> Self {
        f64::asinh(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn atanh(self) -> Self {
        f64::atanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn square(self) -> Self {
        self * self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sign(self) -> Self {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
    fn sigmoid(self) -> Self {
        sigmoid(self)
    }
    fn log_ndtr(self) -> Self {
        log_ndtr(self)
    }
    fn log_cosh(self) -> Self {
        let a = f64::abs(self);
        a + softplus(-2.0 * a) - std::f64::consts::LN_2
    }
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    fn shape(&self) -> (usize, usize) {
        (1, 1)
    }
    fn values(&self) -> Vec<f64> {
        vec![*self]
    }
    fn constant_like(&self, _rows: usize, _cols: usize, data: Vec<f64>) -> Self {
        data[0]
    }
    fn abs_pow(self, e: Self) -> Self {
        f64::abs(self).powf(e)
    }
}

impl<'t> Real for Var<'t> {
    fn lift(&self, v: f64) -> Self {
        self.tape.scalar(v)
    }
    fn exp(self) -> Self {
        Var::exp(self)
    }
    fn ln(self) -> Self {
        Var::ln(self)
    }
    fn softplus(self) -> Self {
        Var::softplus(self)
    }
    fn sinh(self) -> Self {
        Var::sinh(self)
    }
    fn cosh(self) -> Self {
        Var::cosh(self)
    }
    fn asinh(self) -> Self {
        Var::asinh(self)
    }
    fn tanh(self) -> Self {
        Var::tanh(self)
    }
    fn atanh(self) -> Self {
        Var::atanh(self)
    }
    fn sqrt(self) -> Self {
        Var::sqrt(self)
    }
    fn square(self) -> Self {
        Var::square(self)
    }
    fn abs(self) -> Self {
        Var::abs(self)
    }
    fn sign(self) -> Self {
        Var::sign(self)
    }
    fn sigmoid(self) -> Self {
        Var::sigmoid(self)
    }
    fn log_ndtr(self) -> Self {
        Var::log_ndtr(self)
    }
    fn log_cosh(self) -> Self {
        Var::log_cosh(self)
    }
    fn powf(self, p: f64) -> Self {
        Var::powf(self, p)
    }
    fn shape(&self) -> (usize, usize) {
        Var::shape(self)
    }
    fn values(&self) -> Vec<f64> {
        self.tape.with_value(self.id, |m| m.as_slice().to_vec())
    }
    fn constant_like(&self, rows: usize, cols: usize, data: Vec<f64>) -> Self {
        self.tape.constant(Mat::from_vec(rows, cols, data))
    }
}
