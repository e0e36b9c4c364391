use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{table_csv, write_atomic};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::flow_net::{net_forward, sample_masks, DropoutMode};
use crate::flows::flow_forward;
use crate::models::{FlowMode, ModelSpec};
use crate::sparse_gp::q_f0_joint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpRow {
    pub input_id: usize,
    pub f0: f64,
    pub mean: f64,
    pub std: f64,
}

/// The input-dependent flow at each row of `x`, evaluated on `grid`.
/// Bayesian flows average over `samples` dropout draws; the deterministic
/// network gives one draw and zero spread.
pub fn dump_warping(spec: &ModelSpec, x: &Mat, grid: &[f64], samples: usize, seed: u64) -> Result<Vec<WarpRow>> {
    if !spec.flow_mode.is_input_dependent() {
        return Err(Error::Usage("warping dumps need an input-dependent flow".into()));
    }
    let net = spec.net.as_ref().ok_or_else(|| Error::Usage("input-dependent flow without a network".into()))?;
    if x.ncols() != net.config.input_dim {
        return Err(Error::Usage(format!("network expects {} input columns, got {}", net.config.input_dim, x.ncols())));
    }
    let draws: Vec<Mat> = if spec.flow_mode == FlowMode::InputPe {
        vec![net.forward(x, &DropoutMode::Deterministic)?]
    } else {
        if samples == 0 {
            return Err(Error::Usage("need at least one dropout draw".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| net_forward(&net.config, &net.weights, x, &DropoutMode::Masks(sample_masks(&net.config, &mut rng))))
            .collect::<Result<_>>()?
    };
    let mut rows = Vec::with_capacity(x.nrows() * grid.len());
    for i in 0..x.nrows() {
        let curves: Vec<Vec<f64>> = draws
            .iter()
            .map(|raw| {
                let per_point = Mat::from_fn(grid.len(), raw.ncols(), |_, k| raw[(i, k)]);
                flow_forward(&spec.flow, grid, Some(&per_point))
            })
            .collect::<Result<_>>()?;
        let s = curves.len() as f64;
        for (g, f0) in grid.iter().enumerate() {
            let mean = curves.iter().map(|c| c[g]).sum::<f64>() / s;
            let var = curves.iter().map(|c| (c[g] - mean).powi(2)).sum::<f64>() / s;
            rows.push(WarpRow { input_id: i, f0: *f0, mean, std: var.sqrt() });
        }
    }
    Ok(rows)
}

pub fn write_warping_csv(path: &Path, rows: &[WarpRow]) -> Result<()> {
    let header = ["input_id", "f0", "mean_fk", "std_fk"].map(String::from);
    let body = rows.iter().map(|r| vec![r.input_id as f64, r.f0, r.mean, r.std]);
    write_atomic(path, &table_csv(&header, body)?)
}

/// Mean and full covariance of `q(f0)` over the rows of `x`.
pub fn dump_qf0(spec: &ModelSpec, x: &Mat) -> Result<(Vec<f64>, Mat)> {
    spec.validate()?;
    if x.ncols() != spec.input_dim() {
        return Err(Error::Usage(format!("model expects {} input columns, got {}", spec.input_dim(), x.ncols())));
    }
    q_f0_joint(&spec.kernel, spec.mean.value(), &spec.inducing, x)
}

/// One row per point: index, mean, then that row of the covariance.
pub fn write_qf0_csv(path: &Path, mean: &[f64], cov: &Mat) -> Result<()> {
    let n = mean.len();
    let mut header = vec!["point".to_string(), "mean".to_string()];
    header.extend((0..n).map(|j| format!("cov_{j}")));
    let body = (0..n).map(|i| {
        let mut r = vec![i as f64, mean[i]];
        r.extend(cov.row(i).iter());
        r
    });
    write_atomic(path, &table_csv(&header, body)?)
}
