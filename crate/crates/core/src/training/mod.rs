//! Optimization of the bounds.

mod adam;
mod fit;
mod init;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use fit::{fit, TrainTrace};
pub use init::init_pipeline;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Group;

/// Which parameter groups sit still, and when.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FreezeSchedule {
    #[default]
    None,
    /// Likelihood noise frozen for the first `fraction` of the epochs.
    NoiseFrozenFraction { fraction: f64 },
    /// Kernel hyperparameters frozen for the first `epochs` epochs.
    CovarianceFrozenEpochs { epochs: usize },
}

impl FreezeSchedule {
    pub fn noise_frozen() -> Self {
        FreezeSchedule::NoiseFrozenFraction { fraction: 0.6 }
    }

    pub fn covariance_frozen() -> Self {
        FreezeSchedule::CovarianceFrozenEpochs { epochs: 2000 }
    }

    /// Groups frozen during `epoch` of a run lasting `total` epochs.
    pub fn frozen(&self, epoch: usize, total: usize) -> Vec<Group> {
        match *self {
            FreezeSchedule::None => vec![],
            FreezeSchedule::NoiseFrozenFraction { fraction } => {
                if (epoch as f64) < fraction * total as f64 {
                    vec![Group::Likelihood]
                } else {
                    vec![]
                }
            }
            FreezeSchedule::CovarianceFrozenEpochs { epochs } => {
                if epoch < epochs {
                    vec![Group::Kernel]
                } else {
                    vec![]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FlowInit {
    #[default]
    Identity,
    FromData,
    Random,
}

/// Starting values for kernel and noise hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KernelInit {
    /// Leave the configured values alone.
    Keep,
    /// Variances and lengthscales 2.0, noise variance 0.05.
    #[default]
    BlackBox,
    /// Lengthscales 0.1, noise variance 1.0.
    RealWorld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// `None` trains on the full data every step.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub freeze: FreezeSchedule,
    pub flow_init: FlowInit,
    pub kernel_init: KernelInit,
    pub init_epochs: usize,
    /// k-means restarts for the inducing inputs.
    pub kmeans_runs: usize,
    /// Standardize gaussian targets before training.
    pub standardize: bool,
    /// Print one progress line per epoch to standard error.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            epochs: 1000,
            batch_size: None,
            seed: 0,
            freeze: FreezeSchedule::None,
            flow_init: FlowInit::Identity,
            kernel_init: KernelInit::BlackBox,
            init_epochs: 2000,
            kmeans_runs: 10,
            standardize: true,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("learning rate {} must be positive", self.lr)));
        }
        match self.batch_size {
            Some(0) => return Err(Error::Usage("batch size must be positive".into())),
            Some(b) if b > n => return Err(Error::Usage(format!("batch size {b} exceeds the {n} training rows"))),
            _ => {}
        }
        if let FreezeSchedule::NoiseFrozenFraction { fraction } = self.freeze {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Usage(format!("freeze fraction {fraction} outside [0, 1]")));
            }
        }
        if self.kmeans_runs == 0 {
            return Err(Error::Usage("need at least one k-means run".into()));
        }
        Ok(())
    }

    pub fn batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(n).min(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_freeze_covers_leading_sixty_percent() {
        let s = FreezeSchedule::noise_frozen();
        let frozen: usize = (0..10).filter(|&e| !s.frozen(e, 10).is_empty()).count();
        assert_eq!(frozen, 6);
        assert_eq!(s.frozen(0, 10), vec![Group::Likelihood]);
        assert!(s.frozen(6, 10).is_empty());
    }

    #[test]
    fn covariance_freeze_is_epoch_counted() {
        let s = FreezeSchedule::covariance_frozen();
        assert_eq!(s.frozen(1999, 5000), vec![Group::Kernel]);
        assert!(s.frozen(2000, 5000).is_empty());
    }

    #[test]
    fn config_rejects_oversized_batches() {
        let c = TrainConfig { batch_size: Some(11), ..Default::default() };
        assert!(c.validate(10).is_err());
        assert!(c.validate(11).is_ok());
    }

    #[test]
    fn config_json_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "bogus": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"freeze": {"kind": "noise-frozen-fraction", "fraction": 0.6}}"#).unwrap();
        assert_eq!(c.freeze, FreezeSchedule::noise_frozen());
    }
}
