use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{FlowMode, Likelihood, ModelKind, ModelSpec};
use crate::autodiff::{log_ndtr, Mat};
use crate::error::{Error, Result};
use crate::flow_net::{net_forward, sample_masks, DropoutMode};
use crate::flows::FlowChain;
use crate::numstats::{gh_nodes, logsumexp_slice, normal_cdf, normal_quantile, JitterSchedule, LN_2PI, SQRT_PI};
use crate::sparse_gp::marginals_with;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOptions {
    /// Quadrature order; `None` uses the model's prediction order.
    pub quadrature: Option<usize>,
    /// Dropout draws for Bayesian flows; `None` uses the model's default.
    pub samples: Option<usize>,
    /// Predictive draws per point used for quantiles.
    pub quantile_samples: usize,
    pub levels: Vec<f64>,
    pub seed: u64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { quadrature: None, samples: None, quantile_samples: 1000, levels: vec![0.025, 0.975], seed: 0 }
    }
}

/// Predictive summaries on the original target scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub levels: Vec<f64>,
    /// `quantiles[n][k]` is the quantile at `levels[k]` for point `n`.
    pub quantiles: Vec<Vec<f64>>,
    /// `log p(y*_n)` when targets were supplied.
    pub log_density: Option<Vec<f64>>,
}

struct PointOut {
    mean: f64,
    variance: f64,
    quantiles: Vec<f64>,
    log_density: Option<f64>,
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn predict(spec: &ModelSpec, x: &Mat, y: Option<&[f64]>, opts: &PredictOptions) -> Result<Prediction> {
    spec.validate()?;
    if x.ncols() != spec.input_dim() {
        return Err(Error::Usage(format!("model expects {} input columns, got {}", spec.input_dim(), x.ncols())));
    }
    if y.is_some_and(|y| y.len() != x.nrows()) {
        return Err(Error::Usage("targets and inputs differ in length".into()));
    }
    if opts.levels.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(Error::Usage("quantile levels must lie in (0, 1)".into()));
    }
    if opts.quantile_samples == 0 && !opts.levels.is_empty() {
        return Err(Error::Usage("quantiles need at least one predictive sample".into()));
    }
    let bernoulli = matches!(spec.likelihood, Likelihood::BernoulliProbit);
    if bernoulli && spec.target != Default::default() {
        return Err(Error::Usage("bernoulli targets cannot be standardized".into()));
    }
    let schedule = JitterSchedule { initial: spec.jitter, escalated: spec.jitter.max(1e-6), max_attempts: 2 };
    let (mu, var) = marginals_with(&spec.kernel, spec.mean.value(), &spec.inducing, x, &schedule)?;
    let st = spec.target;
    let ys: Option<Vec<f64>> = y.map(|y| st.apply(y));
    let q = opts.quadrature.unwrap_or(spec.predict_quadrature);
    let rule = gh_nodes(q)?;
    let noise = spec.likelihood.noise_variance();

    let points: Vec<PointOut> = if spec.kind == ModelKind::Vwgp {
        (0..x.nrows())
            .into_par_iter()
            .map(|i| vwgp_point(spec, mu[i], var[i], ys.as_ref().map(|y| y[i]), &rule.nodes, &rule.weights, &opts.levels))
            .collect::<Result<_>>()?
    } else {
        let chain = match spec.kind {
            ModelKind::Tgp => spec.flow.clone(),
            _ => FlowChain::identity(),
        };
        let draws = flow_draws(spec, x, opts)?;
        let ctx = PointCtx { spec, chain: &chain, draws: &draws, nodes: &rule.nodes, weights: &rule.weights, noise, opts };
        (0..x.nrows())
            .into_par_iter()
            .map(|i| ctx.point(i, mu[i], var[i], ys.as_ref().map(|y| y[i])))
            .collect::<Result<_>>()?
    };

    let mut out = Prediction {
        mean: Vec::with_capacity(points.len()),
        variance: Vec::with_capacity(points.len()),
        levels: opts.levels.clone(),
        quantiles: Vec::with_capacity(points.len()),
        log_density: ys.as_ref().map(|_| Vec::with_capacity(points.len())),
    };
    let log_scale = st.scale.ln();
    for p in points {
        out.mean.push(p.mean * st.scale + st.mean);
        out.variance.push(p.variance * st.scale * st.scale);
        out.quantiles.push(p.quantiles.iter().map(|v| v * st.scale + st.mean).collect());
        if let (Some(ld), Some(v)) = (out.log_density.as_mut(), p.log_density) {
            ld.push(v - log_scale);
        }
    }
    Ok(out)
}

/// Raw flow parameters per dropout draw: `None` means the chain's own.
fn flow_draws(spec: &ModelSpec, x: &Mat, opts: &PredictOptions) -> Result<Vec<Option<Mat>>> {
    if spec.kind != ModelKind::Tgp {
        return Ok(vec![None]);
    }
    match spec.flow_mode {
        FlowMode::None | FlowMode::Fixed => Ok(vec![None]),
        FlowMode::InputPe => {
            let net = spec.net.as_ref().expect("validated");
            Ok(vec![Some(net_forward(&net.config, &net.weights, x, &DropoutMode::Deterministic)?)])
        }
        FlowMode::InputBa => {
            let net = spec.net.as_ref().expect("validated");
            let s = opts.samples.unwrap_or(spec.predict_samples).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            (0..s)
                .map(|_| {
                    let masks = sample_masks(&net.config, &mut rng);
                    net_forward(&net.config, &net.weights, x, &DropoutMode::Masks(masks)).map(Some)
                })
                .collect()
        }
    }
}

struct PointCtx<'a> {
    spec: &'a ModelSpec,
    chain: &'a FlowChain,
    draws: &'a [Option<Mat>],
    nodes: &'a [f64],
    weights: &'a [f64],
    noise: f64,
    opts: &'a PredictOptions,
}

impl PointCtx<'_> {
    fn raw(&self, d: usize, i: usize) -> Vec<f64> {
        match &self.draws[d] {
            None => self.chain.raw_params(),
            Some(m) => m.row(i).iter().copied().collect(),
        }
    }

    fn point(&self, i: usize, mu: f64, var: f64, y: Option<f64>) -> Result<PointOut> {
        let lik = &self.spec.likelihood;
        let bernoulli = matches!(lik, Likelihood::BernoulliProbit);
        let closed = self.chain.is_empty() && !bernoulli;
        let (mean, variance, log_density) = if closed {
            let v = var + self.noise;
            let ld = y.map(|y| -0.5 * (LN_2PI + v.ln()) - (y - mu).powi(2) / (2.0 * v));
            (mu, v, ld)
        } else {
            let scale = (2.0 * var).sqrt();
            let ln_w: Vec<f64> = self.weights.iter().map(|w| (w / SQRT_PI).ln()).collect();
            let (mut m1, mut m2) = (0.0, 0.0);
            let mut per_draw = Vec::with_capacity(self.draws.len());
            let mut terms = vec![0.0; self.nodes.len()];
            for d in 0..self.draws.len() {
                let raw = self.raw(d, i);
                let (mut a1, mut a2) = (0.0, 0.0);
                for (k, x) in self.nodes.iter().enumerate() {
                    let g = self.chain.forward_r(mu + scale * x, &raw)?;
                    let w = self.weights[k] / SQRT_PI;
                    let h = if bernoulli { normal_cdf(g) } else { g };
                    a1 += w * h;
                    a2 += w * h * h;
                    if let Some(y) = y {
                        terms[k] = ln_w[k] + lik.log_density(y, g, self.noise);
                    }
                }
                m1 += a1;
                m2 += a2;
                if y.is_some() {
                    per_draw.push(logsumexp_slice(&terms));
                }
            }
            let nd = self.draws.len() as f64;
            let (m1, m2) = (m1 / nd, m2 / nd);
            let variance = if bernoulli { m1 * (1.0 - m1) } else { (m2 - m1 * m1).max(0.0) + self.noise };
            let ld = y.map(|_| logsumexp_slice(&per_draw) - nd.ln());
            (m1, variance, ld)
        };
        let quantiles = self.sampled_quantiles(i, mu, var)?;
        Ok(PointOut { mean, variance, quantiles, log_density })
    }

    fn sampled_quantiles(&self, i: usize, mu: f64, var: f64) -> Result<Vec<f64>> {
        if self.opts.levels.is_empty() {
            return Ok(vec![]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        rng.set_stream(i as u64);
        let sd = var.sqrt();
        let sn = self.noise.sqrt();
        let raws: Vec<Vec<f64>> = (0..self.draws.len()).map(|d| self.raw(d, i)).collect();
        let mut ys = Vec::with_capacity(self.opts.quantile_samples);
        for k in 0..self.opts.quantile_samples {
            let f0 = mu + sd * rng.sample::<f64, _>(StandardNormal);
            let g = self.chain.forward_r(f0, &raws[k % raws.len()])?;
            ys.push(match self.spec.likelihood {
                Likelihood::Gaussian { .. } => g + sn * rng.sample::<f64, _>(StandardNormal),
                Likelihood::BernoulliProbit => {
                    if rng.random::<f64>().ln() < log_ndtr(g) {
                        1.0
                    } else {
                        0.0
                    }
                }
            });
        }
        ys.sort_by(f64::total_cmp);
        Ok(self.opts.levels.iter().map(|&p| quantile_sorted(&ys, p)).collect())
    }
}

/// `T^-1` of a latent value.
fn t_inverse(spec: &ModelSpec, t: f64) -> Result<f64> {
    let r = if spec.transform_inverted { spec.transform.forward_scalar(t) } else { spec.transform.inverse_scalar(t) };
    r.map_err(|e| match e {
        Error::Range { step, value } => Error::Convergence(format!("transform step {step} cannot invert {value}")),
        Error::Domain { step, value } => Error::Convergence(format!("transform step {step} undefined at {value}")),
        other => other,
    })
}

fn vwgp_point(
    spec: &ModelSpec,
    mu: f64,
    var: f64,
    y: Option<f64>,
    nodes: &[f64],
    weights: &[f64],
    levels: &[f64],
) -> Result<PointOut> {
    let v = var + spec.likelihood.noise_variance();
    let scale = (2.0 * v).sqrt();
    let (mut m1, mut m2) = (0.0, 0.0);
    for (x, w) in nodes.iter().zip(weights) {
        let yv = t_inverse(spec, mu + scale * x)?;
        m1 += w / SQRT_PI * yv;
        m2 += w / SQRT_PI * yv * yv;
    }
    let sd = v.sqrt();
    let quantiles = levels.iter().map(|&p| t_inverse(spec, mu + sd * normal_quantile(p))).collect::<Result<_>>()?;
    let raw = spec.transform.raw_params();
    let log_density = match y {
        None => None,
        Some(y) => {
            let (t, log_jac) = if spec.transform_inverted {
                let t = spec.transform.inverse_scalar(y)?;
                (t, -spec.transform.forward_log_deriv_r(t, &raw)?.1)
            } else {
                spec.transform.forward_log_deriv_r(y, &raw)?
            };
            Some(-0.5 * (LN_2PI + v.ln()) - (t - mu).powi(2) / (2.0 * v) + log_jac)
        }
    };
    Ok(PointOut { mean: m1, variance: (m2 - m1 * m1).max(0.0), quantiles, log_density })
}
