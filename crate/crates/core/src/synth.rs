//! Synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::kernels::{kernel_self, KernelConfig};
use crate::numstats::{cholesky_jittered, JitterSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// `a tanh(b (sin(2 pi x / period) + c)) + d` on an even grid.
    TanhWarpedSine { period: f64, a: f64, b: f64, c: f64, d: f64 },
    /// One draw from a zero-mean GP on an even grid.
    GpDraw { kernel: KernelConfig },
    /// `exp(f)` for a GP draw `f`, with multiplicative log-normal noise.
    LognormalGp { kernel: KernelConfig },
    /// Two Gaussian blobs in the plane centred at `±separation (1, 1)`,
    /// labelled 0 and 1, with `noise_std` as the blob spread.
    TwoCluster { separation: f64 },
}

impl Generator {
    pub fn tanh_warped_sine() -> Self {
        Generator::TanhWarpedSine { period: 1.0, a: 1.0, b: 2.0, c: 0.0, d: 0.0 }
    }

    pub fn gp_draw() -> Self {
        Generator::GpDraw { kernel: KernelConfig::rbf(1.0, vec![0.3]) }
    }

    pub fn lognormal_gp() -> Self {
        Generator::LognormalGp { kernel: KernelConfig::rbf(1.0, vec![0.3]) }
    }

    pub fn two_cluster() -> Self {
        Generator::TwoCluster { separation: 1.0 }
    }

    /// Default generator for a name such as `tanh-warped-sine`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "tanh-warped-sine" => Ok(Self::tanh_warped_sine()),
            "gp-draw" => Ok(Self::gp_draw()),
            "lognormal-gp" => Ok(Self::lognormal_gp()),
            "two-cluster" => Ok(Self::two_cluster()),
            other => Err(Error::Usage(format!(
                "unknown generator '{other}' (expected tanh-warped-sine, gp-draw, lognormal-gp or two-cluster)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub generator: Generator,
    pub n: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub domain: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { generator: Generator::tanh_warped_sine(), n: 150, noise_std: 0.1, seed: 0, domain: (-1.0, 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub x: Mat,
    pub y: Vec<f64>,
    /// Noise-free targets where the generator has them.
    pub latent: Option<Vec<f64>>,
}

fn grid(n: usize, (lo, hi): (f64, f64)) -> Mat {
    if n == 1 {
        return Mat::from_element(1, 1, 0.5 * (lo + hi));
    }
    Mat::from_fn(n, 1, |i, _| lo + (hi - lo) * i as f64 / (n - 1) as f64)
}

fn gp_sample(kernel: &KernelConfig, x: &Mat, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let k = kernel_self(kernel, x)?;
    let schedule = JitterSchedule { initial: 1e-10, escalated: 1e-6, max_attempts: 5 };
    let (l, _) = cholesky_jittered(&k, &schedule)?;
    let e = Mat::from_fn(x.nrows(), 1, |_, _| rng.sample(StandardNormal));
    Ok((l * e).as_slice().to_vec())
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.n == 0 {
        return Err(Error::Usage("need at least one row".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Usage(format!("noise std {} must be non-negative", spec.noise_std)));
    }
    let (lo, hi) = spec.domain;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Usage(format!("empty domain [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let noisy = |latent: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        latent.iter().map(|v| v + spec.noise_std * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    match &spec.generator {
        Generator::TanhWarpedSine { period, a, b, c, d } => {
            if !(*period > 0.0) {
                return Err(Error::Usage(format!("period {period} must be positive")));
            }
            let x = grid(n, spec.domain);
            let latent: Vec<f64> = x
                .iter()
                .map(|v| a * (b * ((2.0 * std::f64::consts::PI * v / period).sin() + c)).tanh() + d)
                .collect();
            let y = noisy(&latent, &mut rng);
            Ok(SynthData { x, y, latent: Some(latent) })
        }
        Generator::GpDraw { kernel } => {
            let x = grid(n, spec.domain);
            let latent = gp_sample(kernel, &x, &mut rng)?;
            let y = noisy(&latent, &mut rng);
            Ok(SynthData { x, y, latent: Some(latent) })
        }
        Generator::LognormalGp { kernel } => {
            let x = grid(n, spec.domain);
            let f = gp_sample(kernel, &x, &mut rng)?;
            let y = noisy(&f, &mut rng).into_iter().map(f64::exp).collect();
            Ok(SynthData { x, y, latent: Some(f.into_iter().map(f64::exp).collect()) })
        }
        Generator::TwoCluster { separation } => {
            let mut x = Mat::zeros(n, 2);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let label = (i % 2) as f64;
                let centre = if label == 1.0 { *separation } else { -separation };
                for j in 0..2 {
                    x[(i, j)] = centre + spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                }
                y.push(label);
            }
            Ok(SynthData { x, y, latent: None })
        }
    }
}
