use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FlowInit, KernelInit, TrainConfig};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::flow_net::{net_init_match, FlowNet, MatchOptions, NetConfig};
use crate::flows::{
    init_gaussianize, init_gaussianize_forward, init_identity, FlowChain, GaussianizeOptions, IdentityOptions,
};
use crate::kernels::KernelConfig;
use crate::models::{Likelihood, ModelKind, ModelSpec, Standardization};
use crate::sparse_gp::{init_inducing_kmeans, InducingState};

/// Spread of the raw-parameter perturbation used by [`FlowInit::Random`].
const RANDOM_FLOW_STD: f64 = 0.5;

fn recipe_kernel(k: &KernelConfig, init: KernelInit) -> KernelConfig {
    match (k, init) {
        (_, KernelInit::Keep) => k.clone(),
        (KernelConfig::RbfArd { variance, lengthscales }, _) => {
            if init == KernelInit::BlackBox {
                KernelConfig::rbf(2.0, vec![2.0; lengthscales.len()])
            } else {
                KernelConfig::rbf(*variance, vec![0.1; lengthscales.len()])
            }
        }
        (KernelConfig::Periodic { variance, period, .. }, _) => {
            if init == KernelInit::BlackBox {
                KernelConfig::periodic(2.0, 2.0, *period)
            } else {
                KernelConfig::periodic(*variance, 0.1, *period)
            }
        }
        (KernelConfig::WhiteNoise { .. }, _) => k.clone(),
        (KernelConfig::Sum { parts }, _) => {
            KernelConfig::Sum { parts: parts.iter().map(|p| recipe_kernel(p, init)).collect() }
        }
    }
}

fn flow_estimate(chain: &FlowChain, y: &[f64], cfg: &TrainConfig, forward: bool, warn: &mut Vec<String>) -> Result<FlowChain> {
    let report = match cfg.flow_init {
        FlowInit::Identity => init_identity(chain, &IdentityOptions { epochs: cfg.init_epochs, ..Default::default() })?,
        FlowInit::FromData => {
            let opts = GaussianizeOptions { epochs: cfg.init_epochs, ..Default::default() };
            if forward {
                init_gaussianize_forward(chain, y, &opts)?
            } else {
                match init_gaussianize(chain, y, &opts) {
                    // the chain's range misses some targets: start from an
                    // identity fit that covers them
                    Err(Error::Range { .. } | Error::Domain { .. }) => {
                        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let pad = 0.5 * (hi - lo).max(1.0);
                        let id = IdentityOptions { lo: lo - pad, hi: hi + pad, epochs: cfg.init_epochs, ..Default::default() };
                        let start = init_identity(chain, &id)?.chain;
                        init_gaussianize(&start, y, &opts)?
                    }
                    other => other?,
                }
            }
        }
        FlowInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f10e);
            let raw: Vec<f64> =
                chain.raw_params().iter().map(|r| r + RANDOM_FLOW_STD * rng.sample::<f64, _>(StandardNormal)).collect();
            return chain.with_raw_params(&raw);
        }
    };
    warn.extend(report.warning);
    Ok(report.chain)
}

/// Sets starting values: target standardization, kernel and noise recipe,
/// `m = 0`, `S = 1e-5 I`, k-means inducing inputs, then the flow estimate and,
/// for input-dependent flows, a network trained to reproduce it everywhere.
/// Returns the spec and any warnings raised along the way.
pub fn init_pipeline(spec: &ModelSpec, x: &Mat, y: &[f64], cfg: &TrainConfig) -> Result<(ModelSpec, Vec<String>)> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::Usage(format!("{n} inputs and {} targets", y.len())));
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::Usage(format!("model expects {} input columns, got {}", spec.input_dim(), x.ncols())));
    }
    cfg.validate(n)?;
    let mut out = spec.clone();
    let mut warnings = Vec::new();
    let gaussian = matches!(spec.likelihood, Likelihood::Gaussian { .. });

    out.target = if cfg.standardize && gaussian { Standardization::fit(y) } else { Standardization::default() };
    let ys = out.target.apply(y);

    out.kernel = recipe_kernel(&spec.kernel, cfg.kernel_init);
    if gaussian {
        match cfg.kernel_init {
            KernelInit::Keep => {}
            KernelInit::BlackBox => out.likelihood = Likelihood::Gaussian { variance: 0.05 },
            KernelInit::RealWorld => out.likelihood = Likelihood::Gaussian { variance: 1.0 },
        }
    }
    let z = init_inducing_kmeans(x, spec.inducing.num_inducing(), cfg.kmeans_runs, cfg.seed)?;
    out.inducing = InducingState::new(z, spec.inducing.whitened);

    match spec.kind {
        ModelKind::Svgp => {}
        ModelKind::Vwgp => {
            if !out.transform.is_empty() {
                out.transform = flow_estimate(&out.transform, &ys, cfg, !out.transform_inverted, &mut warnings)?;
            }
        }
        ModelKind::Tgp | ModelKind::Gsp => {
            if !out.flow.is_empty() {
                if cfg.flow_init == FlowInit::FromData && !gaussian {
                    return Err(Error::Usage("flow initialization from data needs real-valued targets".into()));
                }
                out.flow = flow_estimate(&out.flow, &ys, cfg, false, &mut warnings)?;
            }
            if out.flow_mode.is_input_dependent() {
                let target = out.flow.raw_params();
                let mut net = match out.net.take() {
                    Some(net) => net,
                    None => FlowNet::new(NetConfig::new(x.ncols(), target.len()), cfg.seed)?,
                };
                let opts = MatchOptions { epochs: cfg.init_epochs, lr: cfg.lr, seed: cfg.seed, ..Default::default() };
                let mse = net_init_match(&mut net, &target, x, &opts)?;
                if mse > 1e-2 {
                    warnings.push(format!("network matches the flow estimate only to MSE {mse:.3e}"));
                }
                out.net = Some(net);
            }
        }
    }
    out.validate()?;
    Ok((out, warnings))
}
