use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::kernels::inv_softplus;
use crate::numstats::LN_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Likelihood {
    /// Additive noise with variance `variance` (stored through `softplus^-1`).
    Gaussian { variance: f64 },
    /// `p(y = 1 | g) = Phi(g)` with `y` in {0, 1}.
    BernoulliProbit,
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        match self {
            Likelihood::Gaussian { variance } if !(*variance > 0.0 && variance.is_finite()) => {
                Err(Error::Usage(format!("noise variance {variance} must be positive")))
            }
            _ => Ok(()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Likelihood::Gaussian { .. } => 1,
            Likelihood::BernoulliProbit => 0,
        }
    }

    pub fn raw(&self) -> Vec<f64> {
        match self {
            Likelihood::Gaussian { variance } => vec![inv_softplus(*variance)],
            Likelihood::BernoulliProbit => vec![],
        }
    }

    pub fn with_raw(&self, raw: &[f64]) -> Likelihood {
        match self {
            Likelihood::Gaussian { .. } => Likelihood::Gaussian { variance: crate::autodiff::softplus(raw[0]) },
            Likelihood::BernoulliProbit => Likelihood::BernoulliProbit,
        }
    }

    pub fn noise_variance(&self) -> f64 {
        match self {
            Likelihood::Gaussian { variance } => *variance,
            Likelihood::BernoulliProbit => 0.0,
        }
    }

    /// `log p(y | g)`; `noise_var` is ignored by the probit likelihood.
    pub(crate) fn log_density<R: Real>(&self, y: R, g: R, noise_var: R) -> R {
        match self {
            Likelihood::Gaussian { .. } => (noise_var.ln() + LN_2PI) * -0.5 - (y - g).square() / (noise_var * 2.0),
            Likelihood::BernoulliProbit => ((y * 2.0 - 1.0) * g).log_ndtr(),
        }
    }
}
