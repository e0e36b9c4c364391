//! The four bounds (SVGP, TGP, V-WGP, G-SP), their shared parameter layout,
//! and their predictive distributions.

mod bound;
mod likelihood;
mod predict;

pub use bound::{
    bound_and_grad, elbo, elbo_gsp, elbo_gsp_samples, elbo_svgp, elbo_tgp, elbo_vwgp, ell_point, grad_check, BoundValues,
};
pub use likelihood::Likelihood;
pub use predict::{predict, PredictOptions, Prediction};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_net::FlowNet;
use crate::flows::FlowChain;
use crate::kernels::{KernelConfig, MeanConfig};
use crate::sparse_gp::InducingState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Svgp,
    Tgp,
    Vwgp,
    Gsp,
}

/// How the prior flow's parameters are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    None,
    Fixed,
    /// Network output with deterministic (scaled) dropout.
    #[serde(rename = "input-dependent-pe")]
    InputPe,
    /// Network output averaged over Monte Carlo dropout masks.
    #[serde(rename = "input-dependent-ba")]
    InputBa,
}

impl FlowMode {
    pub fn is_input_dependent(self) -> bool {
        matches!(self, FlowMode::InputPe | FlowMode::InputBa)
    }
}

/// Affine map between the original targets and the scale the model works on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization { mean: 0.0, scale: 1.0 }
    }
}

impl Standardization {
    pub fn fit(y: &[f64]) -> Self {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Standardization { mean, scale }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.mean) / self.scale).collect()
    }
}

/// Parameter groups addressed by freeze schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    /// Kernel hyperparameters and the prior mean.
    Kernel,
    Likelihood,
    Inducing,
    /// Prior flow parameters or network weights, and the likelihood transform.
    Flow,
}

/// Where each block lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub kernel: Range<usize>,
    pub mean: Range<usize>,
    pub likelihood: Range<usize>,
    pub inducing: Range<usize>,
    pub flow: Range<usize>,
    pub transform: Range<usize>,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.transform.end
    }

    pub fn ranges(&self, group: Group) -> Vec<Range<usize>> {
        match group {
            Group::Kernel => vec![self.kernel.clone(), self.mean.clone()],
            Group::Likelihood => vec![self.likelihood.clone()],
            Group::Inducing => vec![self.inducing.clone()],
            Group::Flow => vec![self.flow.clone(), self.transform.clone()],
        }
    }

    /// `true` for every slot in one of `groups`.
    pub fn mask(&self, groups: &[Group]) -> Vec<bool> {
        let mut m = vec![false; self.total()];
        for g in groups {
            for r in self.ranges(*g) {
                m[r].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub kernel: KernelConfig,
    pub mean: MeanConfig,
    pub inducing: InducingState,
    /// Prior flow G; empty for SVGP and V-WGP.
    pub flow: FlowChain,
    pub flow_mode: FlowMode,
    pub net: Option<FlowNet>,
    pub likelihood: Likelihood,
    /// Likelihood transform T (V-WGP); empty otherwise.
    pub transform: FlowChain,
    /// When set, `transform` holds `T^-1`, so `T(y)` is the chain's inverse.
    pub transform_inverted: bool,
    /// Monte Carlo samples per training evaluation (dropout draws or G-SP samples).
    pub train_samples: usize,
    /// Dropout draws at prediction time.
    pub predict_samples: usize,
    pub train_quadrature: usize,
    pub predict_quadrature: usize,
    pub jitter: f64,
    pub target: Standardization,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, kernel: KernelConfig, inducing: InducingState, likelihood: Likelihood) -> Self {
        ModelSpec {
            kind,
            kernel,
            mean: MeanConfig::Zero,
            inducing,
            flow: FlowChain::identity(),
            flow_mode: FlowMode::None,
            net: None,
            likelihood,
            transform: FlowChain::identity(),
            transform_inverted: false,
            train_samples: if kind == ModelKind::Gsp { 8 } else { 1 },
            predict_samples: 100,
            train_quadrature: 20,
            predict_quadrature: 100,
            jitter: 1e-8,
            target: Standardization::default(),
        }
    }

    pub fn with_flow(mut self, chain: FlowChain, mode: FlowMode) -> Self {
        self.flow = chain;
        self.flow_mode = mode;
        self
    }

    pub fn with_net(mut self, net: FlowNet) -> Self {
        self.net = Some(net);
        self
    }

    pub fn with_transform(mut self, chain: FlowChain, inverted: bool) -> Self {
        self.transform = chain;
        self.transform_inverted = inverted;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.z.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim();
        if self.inducing.num_inducing() == 0 {
            return Err(Error::Usage("need at least one inducing point".into()));
        }
        if self.kernel.input_dim().is_some_and(|k| k != d) {
            return Err(Error::Usage(format!("kernel expects {:?} inputs, inducing points have {d}", self.kernel.input_dim())));
        }
        self.likelihood.validate()?;
        if !(self.jitter > 0.0) || self.train_quadrature < 2 || self.predict_quadrature < 2 {
            return Err(Error::Usage("jitter must be positive and quadrature orders at least 2".into()));
        }
        if self.train_samples == 0 || self.predict_samples == 0 {
            return Err(Error::Usage("sample counts must be positive".into()));
        }
        let flow_free = self.flow.is_empty() && self.flow_mode == FlowMode::None;
        match self.kind {
            ModelKind::Svgp | ModelKind::Vwgp if !flow_free => {
                return Err(Error::Usage(format!("{:?} takes no prior flow", self.kind)));
            }
            ModelKind::Svgp | ModelKind::Tgp | ModelKind::Gsp if !self.transform.is_empty() => {
                return Err(Error::Usage(format!("{:?} takes no likelihood transform", self.kind)));
            }
            _ => {}
        }
        if self.kind == ModelKind::Vwgp && matches!(self.likelihood, Likelihood::BernoulliProbit) {
            return Err(Error::Usage("a likelihood transform needs a gaussian likelihood".into()));
        }
        if self.flow_mode == FlowMode::None && !self.flow.is_empty() {
            return Err(Error::Usage("flow mode 'none' with a non-empty flow".into()));
        }
        if self.kind == ModelKind::Gsp {
            if self.flow_mode.is_input_dependent() {
                return Err(Error::Usage("G-SP supports literal flow parameters only".into()));
            }
            if !self.flow.is_unconstrained() {
                return Err(Error::FlowNotUnconstrained(self.flow.describe()));
            }
        }
        if self.flow_mode.is_input_dependent() {
            let net = self.net.as_ref().ok_or_else(|| Error::Usage("input-dependent flow needs a network".into()))?;
            net.config.validate()?;
            if net.config.input_dim != d || net.config.output_dim != self.flow.num_params() {
                return Err(Error::Usage(format!(
                    "network maps {} -> {}, model needs {} -> {}",
                    net.config.input_dim,
                    net.config.output_dim,
                    d,
                    self.flow.num_params()
                )));
            }
            if net.weights.len() != net.config.num_params() {
                return Err(Error::Usage("network weight count does not match its configuration".into()));
            }
        }
        if !(self.target.scale > 0.0) || !self.target.mean.is_finite() {
            return Err(Error::Usage("target standardization needs a positive scale".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let kernel = take(self.kernel.num_params());
        let mean = take(self.mean.num_params());
        let likelihood = take(self.likelihood.num_params());
        let inducing = take(self.inducing.num_params());
        let flow = take(match self.flow_mode {
            FlowMode::None => 0,
            FlowMode::Fixed => self.flow.num_params(),
            FlowMode::InputPe | FlowMode::InputBa => self.net.as_ref().map_or(0, |n| n.weights.len()),
        });
        let transform = take(self.transform.num_params());
        Layout { kernel, mean, likelihood, inducing, flow, transform }
    }

    /// All trainable parameters, unconstrained, in [`Layout`] order.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.kernel.unconstrained();
        if let MeanConfig::Constant { c } = self.mean {
            p.push(c);
        }
        p.extend(self.likelihood.raw());
        p.extend(self.inducing.flat());
        match self.flow_mode {
            FlowMode::None => {}
            FlowMode::Fixed => p.extend(self.flow.raw_params()),
            FlowMode::InputPe | FlowMode::InputBa => p.extend(self.net.iter().flat_map(|n| n.weights.iter().copied())),
        }
        p.extend(self.transform.raw_params());
        p
    }

    pub fn with_params(&self, p: &[f64]) -> Result<ModelSpec> {
        let lay = self.layout();
        if p.len() != lay.total() {
            return Err(Error::Usage(format!("model has {} parameters, got {}", lay.total(), p.len())));
        }
        let mut out = self.clone();
        out.kernel = self.kernel.with_unconstrained(&p[lay.kernel.clone()])?;
        out.mean = self.mean.with_params(&p[lay.mean.clone()]);
        out.likelihood = self.likelihood.with_raw(&p[lay.likelihood.clone()]);
        out.inducing = self.inducing.with_flat(&p[lay.inducing.clone()])?;
        match self.flow_mode {
            FlowMode::None => {}
            FlowMode::Fixed => out.flow = self.flow.with_raw_params(&p[lay.flow.clone()])?,
            FlowMode::InputPe | FlowMode::InputBa => {
                if let Some(net) = out.net.as_mut() {
                    net.weights = p[lay.flow.clone()].to_vec();
                }
            }
        }
        out.transform = self.transform.with_raw_params(&p[lay.transform.clone()])?;
        Ok(out)
    }
}
