use serde::{Deserialize, Serialize};

use super::{FlowChain, NewtonOptions};
use crate::autodiff::{value_and_grad, Mat, Var};
use crate::error::{Error, Result};
use crate::numstats::LN_2PI;
use crate::training::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityOptions {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Final MSE above this is reported as a warning.
    pub warn_above: f64,
}

impl Default for IdentityOptions {
    fn default() -> Self {
        IdentityOptions { lo: -3.0, hi: 3.0, points: 200, epochs: 2000, lr: 0.01, warn_above: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianizeOptions {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for GaussianizeOptions {
    fn default() -> Self {
        GaussianizeOptions { epochs: 2000, lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitReport {
    pub chain: FlowChain,
    /// Final objective: MSE for identity fits, mean negative log-likelihood
    /// per point for Gaussianization.
    pub loss: f64,
    pub warning: Option<String>,
}

/// Fits the chain to the identity map on an even grid by least squares.
pub fn init_identity(chain: &FlowChain, opts: &IdentityOptions) -> Result<InitReport> {
    if opts.points < 2 || !(opts.hi > opts.lo) {
        return Err(Error::Usage("identity init needs at least two grid points on a non-empty interval".into()));
    }
    let grid: Vec<f64> = (0..opts.points)
        .map(|i| opts.lo + (opts.hi - opts.lo) * i as f64 / (opts.points - 1) as f64)
        .collect();
    let xs = Mat::from_column_slice(grid.len(), 1, &grid);
    let np = chain.num_params();
    let loss_at = |raw: &[f64]| -> Result<(f64, Vec<f64>)> {
        value_and_grad(raw, |t| {
            let p: Vec<Var> = (0..np).map(|k| t.param(k, 1, 1)).collect();
            let x = t.constant(xs.clone());
            let y = chain.forward_r(x, &p)?;
            Ok((y - x).square().mean())
        })
    };
    let mut raw = chain.raw_params();
    if np == 0 {
        let (mse, _) = loss_at(&raw)?;
        return Ok(finish(chain.clone(), mse, opts.warn_above));
    }
    let mut opt = Adam::new(np, opts.lr);
    let mut best = (f64::INFINITY, raw.clone());
    for _ in 0..opts.epochs {
        let (mse, grad) = loss_at(&raw)?;
        if mse < best.0 {
            best = (mse, raw.clone());
        }
        opt.step(&mut raw, &grad)?;
    }
    let (mse, _) = loss_at(&raw)?;
    if mse < best.0 {
        best = (mse, raw);
    }
    Ok(finish(chain.with_raw_params(&best.1)?, best.0, opts.warn_above))
}

fn finish(chain: FlowChain, mse: f64, warn_above: f64) -> InitReport {
    let warning = (mse > warn_above).then(|| format!("identity fit of {} left MSE {mse:.3e}", chain.describe()));
    InitReport { chain, loss: mse, warning }
}

/// Fits the chain so that `G^{-1}(y)` looks standard normal, maximizing
/// `sum_n log N(G^{-1}(y_n)) + log |dG^{-1}/dy|_n`.
pub fn init_gaussianize(chain: &FlowChain, y: &[f64], opts: &GaussianizeOptions) -> Result<InitReport> {
    gaussianize(chain, y, opts, true)
}

/// Like [`init_gaussianize`] for a chain applied to the data directly:
/// fits the chain so that `T(y)` looks standard normal.
pub fn init_gaussianize_forward(chain: &FlowChain, y: &[f64], opts: &GaussianizeOptions) -> Result<InitReport> {
    gaussianize(chain, y, opts, false)
}

fn gaussianize(chain: &FlowChain, y: &[f64], opts: &GaussianizeOptions, inverse: bool) -> Result<InitReport> {
    if y.is_empty() {
        return Err(Error::Usage("gaussianization needs data".into()));
    }
    let ys = Mat::from_column_slice(y.len(), 1, y);
    let np = chain.num_params();
    let newton = NewtonOptions::default();
    let objective = |raw: &[f64]| -> Result<(f64, Vec<f64>)> {
        value_and_grad(raw, |t| {
            let p: Vec<Var> = (0..np).map(|k| t.param(k, 1, 1)).collect();
            let nll = if inverse {
                let x = chain.inverse_var(t.constant(ys.clone()), &p, &newton)?;
                let (_, ld) = chain.forward_log_deriv_r(x, &p)?;
                // the inverse Jacobian is -ld
                x.square() * 0.5 + ld
            } else {
                let (x, ld) = chain.forward_log_deriv_r(t.constant(ys.clone()), &p)?;
                x.square() * 0.5 - ld
            };
            Ok(nll.mean() + 0.5 * LN_2PI)
        })
    };
    let mut raw = chain.raw_params();
    // surfaces an out-of-range target before any optimization
    let (mut last, _) = objective(&raw)?;
    let mut warning = (y.len() < 2).then(|| "gaussianization on a single value is degenerate".to_string());
    if np > 0 {
        let mut opt = Adam::new(np, opts.lr);
        let mut best = (last, raw.clone());
        for epoch in 0..opts.epochs {
            match objective(&raw) {
                Ok((v, grad)) => {
                    if v < best.0 {
                        best = (v, raw.clone());
                    }
                    opt.step(&mut raw, &grad)?;
                }
                Err(e) => {
                    warning = Some(format!("gaussianization stopped at epoch {epoch}: {e}"));
                    break;
                }
            }
        }
        if let Ok((v, _)) = objective(&raw) {
            if v < best.0 {
                best = (v, raw.clone());
            }
        }
        raw = best.1;
        last = best.0;
    }
    Ok(InitReport { chain: chain.with_raw_params(&raw)?, loss: last, warning })
}
