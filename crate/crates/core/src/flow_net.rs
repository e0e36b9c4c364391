//! Dropout MLP mapping inputs to raw flow parameters.
//!
//! Weights are stored flat, layer by layer: `W` (in×out, row-major) then `b`.
//! Dropout acts on hidden activations only. At deterministic evaluation the
//! activations are scaled by `1 - p`; Monte Carlo evaluation multiplies them by
//! a Bernoulli(`1 - p`) mask shared by every row of the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{value_and_grad, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::training::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub output_dim: usize,
    pub weight_decay: f64,
}

impl NetConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        NetConfig { input_dim, hidden: vec![25], activation: Activation::Tanh, dropout: 0.25, output_dim, weight_decay: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Usage(format!("dropout probability {} outside [0, 1)", self.dropout)));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.input_dim == 0 {
            return Err(Error::Usage("network needs at least one non-empty hidden layer and inputs".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Usage(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DropoutMode {
    Deterministic,
    /// Fresh masks drawn from this seed.
    Mc(u64),
    /// Explicit 1×width masks, one per hidden layer.
    Masks(Vec<Mat>),
}

/// Draws one Bernoulli(1 - p) keep-mask per hidden layer.
pub fn sample_masks(config: &NetConfig, rng: &mut impl Rng) -> Vec<Mat> {
    config
        .hidden
        .iter()
        .map(|&h| Mat::from_fn(1, h, |_, _| if rng.random::<f64>() < config.dropout { 0.0 } else { 1.0 }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowNet {
    pub config: NetConfig,
    pub weights: Vec<f64>,
}

impl FlowNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(config.num_params());
        for w in config.widths().windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            weights.extend((0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)));
            weights.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(FlowNet { config, weights })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let n = config.num_params();
        Ok(FlowNet { config, weights: vec![0.0; n] })
    }

    pub fn forward(&self, x: &Mat, mode: &DropoutMode) -> Result<Mat> {
        net_forward(&self.config, &self.weights, x, mode)
    }
}

/// Records the network on `tape` with weights taken from parameter slots
/// starting at `offset`. Returns a B×output matrix of raw slot values.
pub fn forward_var<'t>(config: &NetConfig, tape: &'t Tape, offset: usize, x: Var<'t>, mode: &DropoutMode) -> Result<Var<'t>> {
    forward_with(config, x, mode, |rows, cols, off| tape.param(offset + off, rows, cols))
}

fn forward_with<'t>(
    config: &NetConfig,
    x: Var<'t>,
    mode: &DropoutMode,
    slot: impl Fn(usize, usize, usize) -> Var<'t>,
) -> Result<Var<'t>> {
    config.validate()?;
    if x.ncols() != config.input_dim {
        return Err(Error::Usage(format!("network expects {} inputs, got {}", config.input_dim, x.ncols())));
    }
    let masks = match mode {
        DropoutMode::Deterministic => None,
        DropoutMode::Mc(seed) => Some(sample_masks(config, &mut ChaCha8Rng::seed_from_u64(*seed))),
        DropoutMode::Masks(m) => {
            if m.len() != config.hidden.len() || m.iter().zip(&config.hidden).any(|(m, &h)| m.shape() != (1, h)) {
                return Err(Error::Usage("dropout masks do not match the hidden layers".into()));
            }
            Some(m.clone())
        }
    };
    let tape = x.tape();
    let widths = config.widths();
    let mut off = 0;
    let mut h = x;
    for (l, w) in widths.windows(2).enumerate() {
        let wm = slot(w[0], w[1], off);
        off += w[0] * w[1];
        let b = slot(1, w[1], off);
        off += w[1];
        h = h.matmul(wm) + b;
        if l + 1 < widths.len() - 1 {
            h = match config.activation {
                Activation::Relu => h.clamp_min(0.0),
                Activation::Tanh => h.tanh(),
            };
            h = match &masks {
                None => h * (1.0 - config.dropout),
                Some(m) => h * tape.constant(m[l].clone()),
            };
        }
    }
    Ok(h)
}

/// Plain evaluation of the network.
pub fn net_forward(config: &NetConfig, weights: &[f64], x: &Mat, mode: &DropoutMode) -> Result<Mat> {
    if weights.len() != config.num_params() {
        return Err(Error::Usage(format!("network expects {} weights, got {}", config.num_params(), weights.len())));
    }
    let tape = Tape::new(weights);
    Ok(forward_var(config, &tape, 0, tape.constant(x.clone()), mode)?.value())
}

/// `lambda * ||W||^2` over all weights and biases.
pub fn weight_penalty(weights: &[f64], lambda: f64) -> f64 {
    lambda * weights.iter().map(|w| w * w).sum::<f64>()
}

pub(crate) fn weight_penalty_var<'t>(tape: &'t Tape, offset: usize, n: usize, lambda: f64) -> Var<'t> {
    if n == 0 || lambda == 0.0 {
        return tape.scalar(0.0);
    }
    tape.param(offset, n, 1).square().sum() * lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions { epochs: 2000, batch_size: 256, lr: 0.01, seed: 0 }
    }
}

/// Trains the network so that its deterministic output reproduces the raw
/// flow parameters `target` at every input. Returns the final full-data MSE.
pub fn net_init_match(net: &mut FlowNet, target: &[f64], x: &Mat, opts: &MatchOptions) -> Result<f64> {
    let cfg = net.config.clone();
    if target.len() != cfg.output_dim {
        return Err(Error::Usage(format!("target has {} slots, network outputs {}", target.len(), cfg.output_dim)));
    }
    if x.nrows() == 0 || x.ncols() != cfg.input_dim {
        return Err(Error::Usage(format!("network expects N×{} inputs", cfg.input_dim)));
    }
    let tgt = Mat::from_row_slice(1, target.len(), target);
    let loss = |w: &[f64], xb: &Mat| {
        value_and_grad(w, |t| {
            let out = forward_var(&cfg, t, 0, t.constant(xb.clone()), &DropoutMode::Deterministic)?;
            Ok((out - t.constant(tgt.clone())).square().mean())
        })
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = Adam::new(net.weights.len(), opts.lr);
    let n = x.nrows();
    let b = opts.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..opts.epochs {
        if b < n {
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        for chunk in order.chunks(b) {
            let xb = x.select_rows(chunk);
            let (v, g) = loss(&net.weights, &xb)?;
            if !v.is_finite() {
                return Err(Error::Convergence("network matching diverged".into()));
            }
            opt.step(&mut net.weights, &g).map_err(|_| Error::Convergence("network matching diverged".into()))?;
        }
    }
    let (v, _) = loss(&net.weights, x)?;
    if !v.is_finite() {
        return Err(Error::Convergence("network matching diverged".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, graph};
    use crate::flows::FlowChain;
    use rand_distr::StandardNormal;

    fn random_x(n: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let net = FlowNet::zeros(NetConfig::new(2, 3)).unwrap();
        let x = random_x(5, 2, 1);
        for mode in [DropoutMode::Deterministic, DropoutMode::Mc(4)] {
            assert!(net.forward(&x, &mode).unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn no_dropout_modes_agree() {
        let cfg = NetConfig { dropout: 0.0, hidden: vec![25, 25], activation: Activation::Relu, ..NetConfig::new(2, 4) };
        let net = FlowNet::new(cfg, 3).unwrap();
        let x = random_x(6, 2, 2);
        assert_eq!(net.forward(&x, &DropoutMode::Deterministic).unwrap(), net.forward(&x, &DropoutMode::Mc(9)).unwrap());
    }

    #[test]
    fn mc_mean_matches_deterministic() {
        let cfg = NetConfig { dropout: 0.5, hidden: vec![25], activation: Activation::Relu, ..NetConfig::new(1, 2) };
        let net = FlowNet::new(cfg.clone(), 5).unwrap();
        let x = random_x(3, 1, 4);
        let det = net.forward(&x, &DropoutMode::Deterministic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut s = Mat::zeros(3, 2);
        let mut s2 = Mat::zeros(3, 2);
        for _ in 0..n {
            let out = net.forward(&x, &DropoutMode::Masks(sample_masks(&cfg, &mut rng))).unwrap();
            s += &out;
            s2 += out.component_mul(&out);
        }
        for k in 0..6 {
            let mean = s[k] / n as f64;
            let se = ((s2[k] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - det[k]).abs() < 3.0 * se + 1e-12, "{mean} vs {} (se {se})", det[k]);
        }
    }

    #[test]
    fn seeded_masks_are_reproducible() {
        let net = FlowNet::new(NetConfig::new(2, 3), 1).unwrap();
        let x = random_x(4, 2, 7);
        assert_eq!(net.forward(&x, &DropoutMode::Mc(42)).unwrap(), net.forward(&x, &DropoutMode::Mc(42)).unwrap());
        let cfg = &net.config;
        let m = sample_masks(cfg, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(net.forward(&x, &DropoutMode::Masks(m)).unwrap(), net.forward(&x, &DropoutMode::Mc(42)).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh] {
            let cfg = NetConfig { activation: act, hidden: vec![5, 4], ..NetConfig::new(2, 3) };
            let net = FlowNet::new(cfg.clone(), 2).unwrap();
            let mut w = net.weights.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            // random biases keep relu units away from their kink
            for v in w.iter_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
            let x = random_x(4, 2, 3);
            let build = graph(move |t| Ok(forward_var(&cfg, t, 0, t.constant(x.clone()), &DropoutMode::Deterministic)?.sin().sum()));
            let err = finite_diff_check(build, &w, 1e-6).unwrap();
            assert!(err <= 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(weight_penalty(&[0.0; 4], 1e-5), 0.0);
        assert_eq!(weight_penalty(&[1.0, -3.0], 0.0), 0.0);
        assert!((weight_penalty(&[2.0, 0.0], 1e-5) - 4e-5).abs() < 1e-20);
    }

    #[test]
    fn matching_zero_target() {
        let mut net = FlowNet::new(NetConfig::new(1, 2), 0).unwrap();
        let x = random_x(50, 1, 1);
        let mse = net_init_match(&mut net, &[0.0, 0.0], &x, &MatchOptions { epochs: 500, ..Default::default() }).unwrap();
        assert!(mse <= 1e-6, "{mse}");
    }

    #[test]
    fn matching_identity_sal_parameters() {
        let chain = FlowChain::parse("sal").unwrap();
        let target = chain.raw_params();
        let mut net = FlowNet::new(NetConfig::new(1, target.len()), 0).unwrap();
        let x = random_x(150, 1, 2);
        let mse = net_init_match(&mut net, &target, &x, &MatchOptions::default()).unwrap();
        assert!(mse <= 1e-4, "{mse}");
    }

    #[test]
    fn matching_rejects_wrong_dimension() {
        let mut net = FlowNet::new(NetConfig::new(1, 2), 0).unwrap();
        assert!(matches!(net_init_match(&mut net, &[0.0; 3], &random_x(3, 1, 0), &MatchOptions::default()), Err(Error::Usage(_))));
    }
}
