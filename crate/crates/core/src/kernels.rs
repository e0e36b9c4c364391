//! Covariance and mean functions of the base process.
//!
//! Hyperparameters are stored in their positive (constrained) form; the
//! optimizer sees `softplus^-1` of them, in the order returned by
//! [`KernelConfig::constrained`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelConfig {
    RbfArd { variance: f64, lengthscales: Vec<f64> },
    Periodic { variance: f64, lengthscale: f64, period: f64 },
    WhiteNoise { noise: f64 },
    Sum { parts: Vec<KernelConfig> },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum MeanConfig {
    #[default]
    Zero,
    Constant { c: f64 },
}

impl MeanConfig {
    pub fn value(&self) -> f64 {
        match self {
            MeanConfig::Zero => 0.0,
            MeanConfig::Constant { c } => *c,
        }
    }

    /// Number of free (unconstrained, unbounded) parameters.
    pub fn num_params(&self) -> usize {
        match self {
            MeanConfig::Zero => 0,
            MeanConfig::Constant { .. } => 1,
        }
    }

    pub fn with_params(&self, p: &[f64]) -> MeanConfig {
        match self {
            MeanConfig::Zero => MeanConfig::Zero,
            MeanConfig::Constant { .. } => MeanConfig::Constant { c: p[0] },
        }
    }
}

/// `softplus` applied elementwise.
pub fn constrain(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&x| crate::autodiff::softplus(x)).collect()
}

/// Inverse of [`constrain`]; requires strictly positive input.
pub fn unconstrain(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&y| inv_softplus(y)).collect()
}

pub(crate) fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

impl KernelConfig {
    pub fn rbf(variance: f64, lengthscales: Vec<f64>) -> Self {
        KernelConfig::RbfArd { variance, lengthscales }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        KernelConfig::Periodic { variance, lengthscale, period }
    }

    pub fn white(noise: f64) -> Self {
        KernelConfig::WhiteNoise { noise }
    }

    pub fn num_params(&self) -> usize {
        match self {
            KernelConfig::RbfArd { lengthscales, .. } => 1 + lengthscales.len(),
            KernelConfig::Periodic { .. } => 3,
            KernelConfig::WhiteNoise { .. } => 1,
            KernelConfig::Sum { parts } => parts.iter().map(|p| p.num_params()).sum(),
        }
    }

    /// Input dimension implied by ARD lengthscales, if any component fixes it.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelConfig::RbfArd { lengthscales, .. } => Some(lengthscales.len()),
            KernelConfig::Sum { parts } => parts.iter().find_map(|p| p.input_dim()),
            _ => None,
        }
    }

    pub fn constrained(&self) -> Vec<f64> {
        match self {
            KernelConfig::RbfArd { variance, lengthscales } => {
                let mut v = vec![*variance];
                v.extend_from_slice(lengthscales);
                v
            }
            KernelConfig::Periodic { variance, lengthscale, period } => vec![*variance, *lengthscale, *period],
            KernelConfig::WhiteNoise { noise } => vec![*noise],
            KernelConfig::Sum { parts } => parts.iter().flat_map(|p| p.constrained()).collect(),
        }
    }

    pub fn unconstrained(&self) -> Vec<f64> {
        unconstrain(&self.constrained())
    }

    /// Rebuilds the config from constrained values laid out as in [`Self::constrained`].
    pub fn with_constrained(&self, v: &[f64]) -> Result<Self> {
        if v.len() != self.num_params() {
            return Err(Error::Usage(format!("kernel expects {} parameters, got {}", self.num_params(), v.len())));
        }
        Ok(match self {
            KernelConfig::RbfArd { lengthscales, .. } => {
                KernelConfig::RbfArd { variance: v[0], lengthscales: v[1..=lengthscales.len()].to_vec() }
            }
            KernelConfig::Periodic { .. } => KernelConfig::Periodic { variance: v[0], lengthscale: v[1], period: v[2] },
            KernelConfig::WhiteNoise { .. } => KernelConfig::WhiteNoise { noise: v[0] },
            KernelConfig::Sum { parts } => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let n = p.num_params();
                    out.push(p.with_constrained(&v[off..off + n])?);
                    off += n;
                }
                KernelConfig::Sum { parts: out }
            }
        })
    }

    pub fn with_unconstrained(&self, u: &[f64]) -> Result<Self> {
        self.with_constrained(&constrain(u))
    }

    fn validate(&self) -> Result<()> {
        let v = self.constrained();
        if v.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::Usage(format!("kernel hyperparameters must be finite and positive: {v:?}")));
        }
        if let KernelConfig::Sum { parts } = self {
            if parts.is_empty() {
                return Err(Error::Usage("empty kernel sum".into()));
            }
        }
        Ok(())
    }

    /// Covariance block on the tape. `u` is the unconstrained parameter column;
    /// `x2 = None` requests the self-covariance of `x`, the only place the
    /// white-noise component contributes.
    pub fn matrix_var<'t>(&self, u: Var<'t>, x: Var<'t>, x2: Option<Var<'t>>) -> Var<'t> {
        self.matrix_at(u, 0, x, x2)
    }

    fn matrix_at<'t>(&self, u: Var<'t>, off: usize, x: Var<'t>, x2: Option<Var<'t>>) -> Var<'t> {
        let tape = x.tape();
        let slot = |k: usize| u.rows(vec![off + k]).softplus();
        let (n, d) = x.shape();
        let y = x2.unwrap_or(x);
        let n2 = y.nrows();
        match self {
            KernelConfig::RbfArd { lengthscales, .. } => {
                let ls = u.rows((1..=lengthscales.len()).map(|k| off + k).collect()).softplus().t();
                let xs = x / ls;
                let ys = y / ls;
                let r1 = xs.square().sum_rows();
                let r2 = ys.square().sum_rows().t();
                let d2 = (r1 + r2 - xs.matmul(ys.t()) * 2.0).clamp_min(0.0);
                (d2 * -0.5).exp() * slot(0)
            }
            KernelConfig::Periodic { .. } => {
                let (var, ell, period) = (slot(0), slot(1), slot(2));
                let mut acc: Option<Var<'t>> = None;
                for j in 0..d {
                    let diff = x.col(j) - y.col(j).t();
                    let s = (diff * std::f64::consts::PI / period).sin().square();
                    acc = Some(match acc {
                        Some(a) => a + s,
                        None => s,
                    });
                }
                let s = acc.unwrap_or_else(|| tape.constant(Mat::zeros(n, n2)));
                (s * -2.0 / ell.square()).exp() * var
            }
            KernelConfig::WhiteNoise { .. } => {
                if x2.is_none() {
                    tape.constant(Mat::identity(n, n)) * slot(0)
                } else {
                    tape.constant(Mat::zeros(n, n2))
                }
            }
            KernelConfig::Sum { parts } => {
                let mut off = off;
                let mut acc: Option<Var<'t>> = None;
                for p in parts {
                    let k = p.matrix_at(u, off, x, x2);
                    off += p.num_params();
                    acc = Some(match acc {
                        Some(a) => a + k,
                        None => k,
                    });
                }
                acc.expect("validated non-empty sum")
            }
        }
    }

    /// Diagonal of the self-covariance as an N×1 column.
    pub fn diag_var<'t>(&self, u: Var<'t>, x: Var<'t>) -> Var<'t> {
        self.diag_at(u, 0, x)
    }

    fn diag_at<'t>(&self, u: Var<'t>, off: usize, x: Var<'t>) -> Var<'t> {
        let ones = x.tape().constant(Mat::from_element(x.nrows(), 1, 1.0));
        match self {
            KernelConfig::RbfArd { .. } | KernelConfig::Periodic { .. } | KernelConfig::WhiteNoise { .. } => {
                ones * u.rows(vec![off]).softplus()
            }
            KernelConfig::Sum { parts } => {
                let mut off = off;
                let mut acc: Option<Var<'t>> = None;
                for p in parts {
                    let k = p.diag_at(u, off, x);
                    off += p.num_params();
                    acc = Some(match acc {
                        Some(a) => a + k,
                        None => k,
                    });
                }
                acc.expect("validated non-empty sum")
            }
        }
    }
}

fn eval(config: &KernelConfig, x: &Mat, x2: Option<&Mat>) -> Result<Mat> {
    config.validate()?;
    if let Some(d) = config.input_dim() {
        if x.ncols() != d || x2.is_some_and(|y| y.ncols() != d) {
            return Err(Error::Usage(format!("kernel expects {d} input columns")));
        }
    }
    if let Some(y) = x2 {
        if y.ncols() != x.ncols() {
            return Err(Error::Usage("kernel inputs differ in column count".into()));
        }
    }
    let tape = Tape::new(&config.unconstrained());
    let u = tape.param(0, config.num_params(), 1);
    let k = config.matrix_var(u, tape.constant(x.clone()), x2.map(|y| tape.constant(y.clone())));
    Ok(k.value())
}

/// Cross-covariance `K(x, x2)`; white noise never contributes here.
pub fn kernel_matrix(config: &KernelConfig, x: &Mat, x2: &Mat) -> Result<Mat> {
    eval(config, x, Some(x2))
}

/// Self-covariance `K(x, x)` including any white-noise nugget.
pub fn kernel_self(config: &KernelConfig, x: &Mat) -> Result<Mat> {
    eval(config, x, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, graph};
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_x(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn rbf_unit_diagonal_and_plug_in() {
        let k = KernelConfig::rbf(1.0, vec![0.7]);
        let x = Mat::from_column_slice(2, 1, &[0.3, -1.1]);
        let km = kernel_self(&k, &x).unwrap();
        assert!((km[(0, 0)] - 1.0).abs() < 1e-15);
        let k1 = KernelConfig::rbf(1.0, vec![1.0]);
        let v = kernel_matrix(&k1, &Mat::zeros(1, 1), &Mat::from_element(1, 1, 2f64.sqrt())).unwrap();
        assert!((v[(0, 0)] - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn periodic_one_period_apart() {
        let k = KernelConfig::periodic(1.7, 0.4, 0.8);
        let v = kernel_matrix(&k, &Mat::from_element(1, 1, 0.1), &Mat::from_element(1, 1, 0.9)).unwrap();
        assert!((v[(0, 0)] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn periodic_matches_closed_form() {
        let (var, ell, p) = (1.3, 0.6, 0.9);
        let k = KernelConfig::periodic(var, ell, p);
        let v = kernel_matrix(&k, &Mat::from_element(1, 1, 0.2), &Mat::from_element(1, 1, -0.35)).unwrap();
        let s = (std::f64::consts::PI * 0.55 / p).sin();
        assert!((v[(0, 0)] - var * (-2.0 * s * s / (ell * ell)).exp()).abs() < 1e-12);
    }

    #[test]
    fn white_noise_only_on_self_covariance() {
        let k = KernelConfig::Sum { parts: vec![KernelConfig::rbf(1.0, vec![1.0]), KernelConfig::white(0.5)] };
        let x = Mat::from_column_slice(2, 1, &[0.0, 0.0]);
        let s = kernel_self(&k, &x).unwrap();
        assert!((s[(0, 0)] - 1.5).abs() < 1e-12 && (s[(0, 1)] - 1.0).abs() < 1e-12);
        let c = kernel_matrix(&k, &x, &x).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constrain_round_trip() {
        assert!((constrain(&[0.0])[0] - 2f64.ln()).abs() < 1e-15);
        let v = constrain(&unconstrain(&[2.0]))[0];
        assert!((v - 2.0).abs() < 1e-12);
        assert!(constrain(&[-40.0])[0] > 0.0);
        for y in [1e-6, 0.1, 1.0, 25.0, 40.0, 1e3] {
            assert!((constrain(&unconstrain(&[y]))[0] - y).abs() <= 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kernels = [
            KernelConfig::rbf(1.3, vec![0.5, 2.0]),
            KernelConfig::periodic(0.9, 0.7, 1.3),
            KernelConfig::Sum { parts: vec![KernelConfig::rbf(1.0, vec![1.0, 1.0]), KernelConfig::white(0.1)] },
        ];
        for _ in 0..50 {
            let n = rng.random_range(2..=20);
            let x = random_x(n, 2, &mut rng);
            for k in &kernels {
                let m = kernel_self(k, &x).unwrap();
                assert!((&m - m.transpose()).abs().max() < 1e-12);
                let eig = SymmetricEigen::new(m).eigenvalues;
                assert!(eig.min() >= -1e-10, "{k:?}: {}", eig.min());
            }
        }
    }

    #[test]
    fn ard_with_equal_lengthscales_is_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_x(7, 3, &mut rng);
        let y = random_x(5, 3, &mut rng);
        let k = kernel_matrix(&KernelConfig::rbf(2.0, vec![0.8; 3]), &x, &y).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let d2 = (x.row(i) - y.row(j)).norm_squared();
                assert!((k[(i, j)] - 2.0 * (-0.5 * d2 / 0.64).exp()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Mat::zeros(2, 1);
        assert!(matches!(kernel_self(&KernelConfig::rbf(f64::NAN, vec![1.0]), &x), Err(Error::Usage(_))));
        assert!(matches!(kernel_self(&KernelConfig::rbf(1.0, vec![1.0, 1.0]), &x), Err(Error::Usage(_))));
    }

    #[test]
    fn diag_matches_matrix_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_x(6, 1, &mut rng);
        let k = KernelConfig::Sum { parts: vec![KernelConfig::periodic(1.1, 0.5, 0.7), KernelConfig::white(0.2)] };
        let full = kernel_self(&k, &x).unwrap();
        let tape = Tape::new(&k.unconstrained());
        let d = k.diag_var(tape.param(0, k.num_params(), 1), tape.constant(x)).value();
        for i in 0..6 {
            assert!((d[i] - full[(i, i)]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_wrt_hyperparameters_and_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_x(4, 2, &mut rng);
        for k in [
            KernelConfig::rbf(1.3, vec![0.5, 2.0]),
            KernelConfig::Sum { parts: vec![KernelConfig::periodic(0.9, 0.7, 1.3), KernelConfig::white(0.3)] },
        ] {
            let np = k.num_params();
            let mut p = k.unconstrained();
            p.extend((0..6).map(|_| rng.random_range(-1.0..1.0)));
            let xc = x.clone();
            let kc = k.clone();
            let build = graph(move |t| {
                let u = t.param(0, np, 1);
                let z = t.param(np, 3, 2);
                let kzz = kc.matrix_var(u, z, None);
                let kxz = kc.matrix_var(u, t.constant(xc.clone()), Some(z));
                Ok((kzz.sin().sum() + kxz.square().sum()) * 0.5)
            });
            let err = finite_diff_check(build, &p, 1e-6).unwrap();
            assert!(err < 1e-6, "{k:?}: {err}");
        }
    }
}
