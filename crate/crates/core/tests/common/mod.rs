#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tgp::autodiff::Mat;
use tgp::flow_net::{FlowNet, NetConfig};
use tgp::flows::{FlowChain, FlowStep};
use tgp::kernels::KernelConfig;
use tgp::models::{FlowMode, Likelihood, ModelKind, ModelSpec};
use tgp::sparse_gp::InducingState;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Chain with every raw parameter nudged by up to `scale`.
pub fn perturbed(preset: &str, seed: u64, scale: f64) -> FlowChain {
    let c = FlowChain::parse(preset).unwrap();
    let mut r = rng(seed);
    let raw: Vec<f64> = c.raw_params().iter().map(|v| v + scale * r.random_range(-1.0..1.0)).collect();
    c.with_raw_params(&raw).unwrap()
}

pub fn affine(a: f64, b: f64) -> FlowChain {
    FlowChain::new(vec![FlowStep::with_values(tgp::flows::StepKind::Affine, &[a, b]).unwrap()])
}

/// Random 1-D inputs, targets and a spec with a random q(u0).
pub fn toy(kind: ModelKind, n: usize, m: usize, whitened: bool, seed: u64) -> (ModelSpec, Mat, Vec<f64>) {
    let mut r = rng(seed);
    let x = Mat::from_fn(n, 1, |_, _| r.random_range(-2.0..2.0));
    let y: Vec<f64> = (0..n).map(|i| (1.3 * x[i]).sin() + 0.2 * normal(&mut r)).collect();
    let z = Mat::from_fn(m, 1, |_, _| r.random_range(-2.0..2.0));
    let mut st = InducingState::new(z, whitened);
    st.m = Mat::from_fn(m, 1, |_, _| 0.5 * normal(&mut r));
    st.s_factor = Mat::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => 0.1 * normal(&mut r),
        std::cmp::Ordering::Equal => 0.2 + 0.3 * r.random::<f64>(),
        std::cmp::Ordering::Less => 0.0,
    });
    let spec = ModelSpec::new(kind, KernelConfig::rbf(1.1, vec![0.8]), st, Likelihood::Gaussian { variance: 0.3 });
    (spec, x, y)
}

pub fn toy_tgp(preset: &str, mode: FlowMode, n: usize, m: usize, seed: u64) -> (ModelSpec, Mat, Vec<f64>) {
    let (spec, x, y) = toy(ModelKind::Tgp, n, m, true, seed);
    let chain = perturbed(preset, seed + 1, 0.3);
    let mut spec = spec.with_flow(chain.clone(), mode);
    if mode.is_input_dependent() {
        let mut cfg = NetConfig::new(1, chain.num_params());
        cfg.hidden = vec![6];
        spec = spec.with_net(FlowNet::new(cfg, seed + 2).unwrap());
        // keep the network output near the literal parameters
        let net = spec.net.as_mut().unwrap();
        let np = net.weights.len();
        let out = chain.num_params();
        for (k, v) in chain.raw_params().iter().enumerate() {
            net.weights[np - out + k] = *v;
        }
        for w in net.weights.iter_mut().take(np - out) {
            *w *= 0.5;
        }
    }
    spec.train_samples = 2;
    (spec, x, y)
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
