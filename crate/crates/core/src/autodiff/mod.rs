//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is built by running ordinary Rust code on [`Var`] handles;
//! every recorded node keeps its primal value so that [`Tape::backward`]
//! can replay the adjoint rules in reverse insertion order.

mod real;
mod tape;
mod var;

pub use real::Real;
pub use tape::{Mat, Tape, Unary, Var};

pub(crate) use tape::{log_ndtr, softplus};

use crate::error::{Error, Result};

/// Pins a closure to the higher-ranked signature the tape entry points expect.
pub fn graph<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
{
    f
}

/// Records `build` on a fresh tape bound to `params` and marks its output as the loss.
pub fn forward<F>(params: &[f64], build: F) -> Result<(f64, Tape)>
where
    F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
{
    let tape = Tape::new(params);
    let loss = {
        let out = build(&tape)?;
        tape.set_loss(out)?
    };
    Ok((loss, tape))
}

pub fn value_and_grad<F>(params: &[f64], build: F) -> Result<(f64, Vec<f64>)>
where
    F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
{
    let (loss, tape) = forward(params, build)?;
    let grad = tape.backward()?;
    Ok((loss, grad))
}

/// Largest `|analytic - central| / max(1, |central|)` over all parameters.
pub fn finite_diff_check<F>(build: F, params: &[f64], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape) -> Result<Var<'t>>,
{
    let (_, grad) = value_and_grad(params, &build)?;
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in 0..params.len() {
        p[i] = params[i] + step;
        let (hi, _) = forward(&p, &build)?;
        p[i] = params[i] - step;
        let (lo, _) = forward(&p, &build)?;
        p[i] = params[i];
        let fd = (hi - lo) / (2.0 * step);
        if !fd.is_finite() {
            return Err(Error::NonFiniteValue { node: 0, term: None });
        }
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}
