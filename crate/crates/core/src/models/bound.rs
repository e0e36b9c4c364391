use std::f64::consts::SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FlowMode, Layout, Likelihood, ModelKind, ModelSpec};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result, Term};
use crate::flow_net::{forward_var, sample_masks, weight_penalty_var, DropoutMode};
use crate::flows::{FlowChain, NewtonOptions};
use crate::kernels::MeanConfig;
use crate::numstats::{gh_nodes, QuadratureRule, LN_2PI, SQRT_PI};
use crate::sparse_gp::{kl_var, kzz_factor, marginals_var, projection, InducingVars};

/// Largest data set G-SP accepts; its cost is cubic in N.
pub const GSP_MAX_N: usize = 2000;

/// Bound value and its parts. `ell` includes any likelihood-transform
/// Jacobian; for G-SP `kl` is the Monte Carlo estimate of the prior term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundValues {
    pub elbo: f64,
    pub ell: f64,
    pub kl: f64,
    pub penalty: f64,
}

struct Terms<'t> {
    elbo: Var<'t>,
    ell: Var<'t>,
    kl: Var<'t>,
    penalty: Var<'t>,
    /// Per-sample Monte Carlo values (G-SP only).
    samples: Option<Var<'t>>,
}

impl Terms<'_> {
    fn values(&self) -> BoundValues {
        BoundValues { elbo: self.elbo.item(), ell: self.ell.item(), kl: self.kl.item(), penalty: self.penalty.item() }
    }
}

/// `E_{N(mean, variance)}[log p(y | G(f))]` for a single point by quadrature.
pub fn ell_point(
    likelihood: &Likelihood,
    y: f64,
    mean: f64,
    variance: f64,
    chain: &FlowChain,
    raw: &[f64],
    rule: &QuadratureRule,
) -> Result<f64> {
    if !(variance >= 0.0) {
        return Err(Error::Usage(format!("negative variance {variance}")));
    }
    let noise = likelihood.noise_variance();
    let h = |f: f64| -> Result<f64> { Ok(likelihood.log_density(y, chain.forward_r(f, raw)?, noise)) };
    if variance == 0.0 {
        return h(mean);
    }
    let scale = (2.0 * variance).sqrt();
    let mut acc = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        acc += w / SQRT_PI * h(mean + scale * x)?;
    }
    Ok(acc)
}

fn checked<'t>(tape: &Tape, v: Var<'t>, term: Term) -> Result<Var<'t>> {
    match tape.error() {
        Some(e) => Err(e.with_term(term)),
        None => Ok(v),
    }
}

/// Variables shared by every bound.
struct Common<'t> {
    tape: &'t Tape,
    lay: Layout,
    ku: Var<'t>,
    mean_c: Var<'t>,
    noise: Var<'t>,
    iv: InducingVars<'t>,
    l: Var<'t>,
}

impl<'t> Common<'t> {
    fn bind(spec: &ModelSpec, tape: &'t Tape) -> Common<'t> {
        let lay = spec.layout();
        let ku = tape.param(lay.kernel.start, lay.kernel.len(), 1);
        let mean_c = match spec.mean {
            MeanConfig::Zero => tape.scalar(0.0),
            MeanConfig::Constant { .. } => tape.param(lay.mean.start, 1, 1),
        };
        let noise = match spec.likelihood {
            Likelihood::Gaussian { .. } => tape.param(lay.likelihood.start, 1, 1).softplus(),
            Likelihood::BernoulliProbit => tape.scalar(1.0),
        };
        let iv = spec.inducing.vars(tape, lay.inducing.start);
        let l = kzz_factor(&spec.kernel, ku, &iv, spec.jitter);
        Common { tape, lay, ku, mean_c, noise, iv, l }
    }

    fn marginals(&self, spec: &ModelSpec, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        marginals_var(&spec.kernel, self.ku, self.mean_c, &self.iv, self.l, x)
    }

    fn flow_raw(&self, spec: &ModelSpec, x: Var<'t>, mode: &DropoutMode) -> Result<Vec<Var<'t>>> {
        let start = self.lay.flow.start;
        match spec.flow_mode {
            FlowMode::None => Ok(vec![]),
            FlowMode::Fixed => Ok((0..spec.flow.num_params()).map(|k| self.tape.param(start + k, 1, 1)).collect()),
            FlowMode::InputPe | FlowMode::InputBa => {
                let net = spec.net.as_ref().ok_or_else(|| Error::Usage("input-dependent flow needs a network".into()))?;
                let out = forward_var(&net.config, self.tape, start, x, mode)?;
                Ok((0..out.ncols()).map(|k| out.col(k)).collect())
            }
        }
    }

    fn transform_raw(&self, spec: &ModelSpec) -> Vec<Var<'t>> {
        (0..spec.transform.num_params()).map(|k| self.tape.param(self.lay.transform.start + k, 1, 1)).collect()
    }
}

fn gaussian_ell_closed<'t>(noise: Var<'t>, y: Var<'t>, mu: Var<'t>, var: Var<'t>) -> Var<'t> {
    (noise.ln() + LN_2PI) * -0.5 - ((y - mu).square() + var) / (noise * 2.0)
}

/// Per-point quadrature ELL as a B×1 column.
fn quadrature_ell<'t>(
    likelihood: &Likelihood,
    noise: Var<'t>,
    y: Var<'t>,
    mu: Var<'t>,
    var: Var<'t>,
    chain: &FlowChain,
    raw: &[Var<'t>],
    rule: &QuadratureRule,
) -> Result<Var<'t>> {
    let tape = mu.tape();
    let q = rule.order();
    let nodes = tape.constant(Mat::from_fn(1, q, |_, j| SQRT_2 * rule.nodes[j]));
    let weights = tape.constant(Mat::from_fn(q, 1, |i, _| rule.weights[i] / SQRT_PI));
    let f = mu + var.sqrt() * nodes;
    let g = chain.forward_r(f, raw)?;
    Ok(likelihood.log_density(y, g, noise).matmul(weights))
}

fn check_batch(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize) -> Result<()> {
    spec.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::Usage(format!("batch has {} inputs and {} targets", x.nrows(), y.len())));
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::Usage(format!("model expects {} input columns, got {}", spec.input_dim(), x.ncols())));
    }
    if n_total < y.len() {
        return Err(Error::Usage(format!("total size {n_total} is smaller than the batch {}", y.len())));
    }
    if matches!(spec.likelihood, Likelihood::BernoulliProbit) && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation("bernoulli targets must be 0 or 1".into()));
    }
    Ok(())
}

fn column(y: &[f64]) -> Mat {
    Mat::from_column_slice(y.len(), 1, y)
}

fn svgp_terms<'t>(spec: &ModelSpec, tape: &'t Tape, x: &Mat, y: &[f64], n_total: usize) -> Result<Terms<'t>> {
    if !spec.flow.is_empty() {
        return Err(Error::Usage("the SVGP bound takes no prior flow".into()));
    }
    let c = Common::bind(spec, tape);
    let kl = checked(tape, kl_var(&c.iv, c.l), Term::Kl)?;
    let (mu, var) = c.marginals(spec, tape.constant(x.clone()));
    let yv = tape.constant(column(y));
    let col = match spec.likelihood {
        Likelihood::Gaussian { .. } => gaussian_ell_closed(c.noise, yv, mu, var),
        Likelihood::BernoulliProbit => {
            quadrature_ell(&spec.likelihood, c.noise, yv, mu, var, &spec.flow, &[], gh_nodes(spec.train_quadrature)?.as_ref())?
        }
    };
    let ell = checked(tape, col.sum() * (n_total as f64 / y.len() as f64), Term::Ell)?;
    let penalty = tape.scalar(0.0);
    Ok(Terms { elbo: ell - kl, ell, kl, penalty, samples: None })
}

fn tgp_terms<'t>(spec: &ModelSpec, tape: &'t Tape, x: &Mat, y: &[f64], n_total: usize, seed: u64) -> Result<Terms<'t>> {
    if !spec.transform.is_empty() {
        return Err(Error::Usage("the TGP bound takes no likelihood transform".into()));
    }
    let c = Common::bind(spec, tape);
    let kl = checked(tape, kl_var(&c.iv, c.l), Term::Kl)?;
    let xv = tape.constant(x.clone());
    let (mu, var) = c.marginals(spec, xv);
    let yv = tape.constant(column(y));
    let rule = gh_nodes(spec.train_quadrature)?;
    let ell_with = |mode: &DropoutMode| -> Result<Var<'t>> {
        let raw = c.flow_raw(spec, xv, mode)?;
        quadrature_ell(&spec.likelihood, c.noise, yv, mu, var, &spec.flow, &raw, &rule)
    };
    let col = if spec.flow_mode == FlowMode::InputBa {
        let net = spec.net.as_ref().ok_or_else(|| Error::Usage("input-dependent flow needs a network".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = None;
        for _ in 0..spec.train_samples {
            let e = ell_with(&DropoutMode::Masks(sample_masks(&net.config, &mut rng)))?;
            acc = Some(match acc {
                None => e,
                Some(a) => a + e,
            });
        }
        acc.expect("at least one sample") * (1.0 / spec.train_samples as f64)
    } else {
        ell_with(&DropoutMode::Deterministic)?
    };
    let ell = checked(tape, col.sum() * (n_total as f64 / y.len() as f64), Term::Ell)?;
    let penalty = match (&spec.net, spec.flow_mode.is_input_dependent()) {
        (Some(net), true) => weight_penalty_var(tape, c.lay.flow.start, c.lay.flow.len(), net.config.weight_decay),
        _ => tape.scalar(0.0),
    };
    let penalty = checked(tape, penalty, Term::Penalty)?;
    Ok(Terms { elbo: ell - kl - penalty, ell, kl, penalty, samples: None })
}

fn vwgp_terms<'t>(spec: &ModelSpec, tape: &'t Tape, x: &Mat, y: &[f64], n_total: usize) -> Result<Terms<'t>> {
    if !spec.flow.is_empty() {
        return Err(Error::Usage("the V-WGP bound takes no prior flow".into()));
    }
    let c = Common::bind(spec, tape);
    let kl = checked(tape, kl_var(&c.iv, c.l), Term::Kl)?;
    let (mu, var) = c.marginals(spec, tape.constant(x.clone()));
    let yv = tape.constant(column(y));
    let traw = c.transform_raw(spec);
    let (t, log_jac) = if spec.transform_inverted {
        let t = spec.transform.inverse_var(yv, &traw, &NewtonOptions::default()).map_err(|e| match e {
            Error::Range { step, value } => Error::Domain { step, value },
            other => other,
        })?;
        let (_, ld) = spec.transform.forward_log_deriv_r(t, &traw)?;
        (t, -ld)
    } else {
        spec.transform.forward_log_deriv_r(yv, &traw)?
    };
    let col = gaussian_ell_closed(c.noise, t, mu, var) + log_jac;
    let ell = checked(tape, col.sum() * (n_total as f64 / y.len() as f64), Term::Ell)?;
    let penalty = tape.scalar(0.0);
    Ok(Terms { elbo: ell - kl, ell, kl, penalty, samples: None })
}

fn gsp_terms<'t>(spec: &ModelSpec, tape: &'t Tape, x: &Mat, y: &[f64], samples: usize, seed: u64) -> Result<Terms<'t>> {
    if y.len() > GSP_MAX_N {
        return Err(Error::Usage(format!("G-SP is limited to {GSP_MAX_N} points, got {}", y.len())));
    }
    if samples == 0 {
        return Err(Error::Usage("G-SP needs at least one sample".into()));
    }
    if spec.flow_mode.is_input_dependent() || !spec.transform.is_empty() {
        return Err(Error::Usage("G-SP supports a literal prior flow only".into()));
    }
    if !spec.flow.is_unconstrained() {
        return Err(Error::FlowNotUnconstrained(spec.flow.describe()));
    }
    let c = Common::bind(spec, tape);
    let (n, m) = (y.len(), spec.inducing.num_inducing());
    let xv = tape.constant(x.clone());
    let (mu, var) = c.marginals(spec, xv);
    let yv = tape.constant(column(y));
    let ell_col = match spec.likelihood {
        Likelihood::Gaussian { .. } => gaussian_ell_closed(c.noise, yv, mu, var),
        Likelihood::BernoulliProbit => {
            quadrature_ell(&spec.likelihood, c.noise, yv, mu, var, &FlowChain::identity(), &[], gh_nodes(spec.train_quadrature)?.as_ref())?
        }
    };
    let ell = checked(tape, ell_col.sum(), Term::Ell)?;

    // reparameterized draws from the Gaussian q(f, u) = p(f | u) q(u)
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps_u = Mat::from_fn(m, samples, |_, _| rng.sample(StandardNormal));
    let eps_f = Mat::from_fn(n, samples, |_, _| rng.sample(StandardNormal));
    let jitter = tape.constant(Mat::identity(n, n) * spec.jitter);
    let (at, b) = projection(&spec.kernel, c.ku, &c.iv, c.l, xv);
    let kxx = spec.kernel.matrix_var(c.ku, xv, None);
    let lc = (kxx - b.t().matmul(b) + jitter).cholesky();
    let v = c.iv.m + c.iv.s_factor.matmul(tape.constant(eps_u.clone()));
    let u = if c.iv.whitened { c.l.matmul(v) } else { v } + c.mean_c;
    let f = at.t().matmul(v) + lc.matmul(tape.constant(eps_f.clone())) + c.mean_c;
    let w = f.vstack(u);

    let raw: Vec<Var> = match spec.flow_mode {
        FlowMode::Fixed => c.flow_raw(spec, xv, &DropoutMode::Deterministic)?,
        _ => vec![],
    };
    let unconstrained = |e: Error| match e {
        Error::Range { step, value } => {
            Error::FlowNotUnconstrained(format!("step {step} of {} cannot invert {value}", spec.flow.describe()))
        }
        other => other,
    };
    let w0 = spec.flow.inverse_var(w, &raw, &NewtonOptions::default()).map_err(unconstrained)?;
    let (_, ld) = spec.flow.forward_log_deriv_r(w0, &raw)?;
    let xz = xv.vstack(c.iv.z);
    let kj = spec.kernel.matrix_var(c.ku, xz, None) + tape.constant(Mat::identity(n + m, n + m) * spec.jitter);
    let lj = kj.cholesky();
    let half_log_2pi = 0.5 * (n + m) as f64 * LN_2PI;
    let log_p = lj.solve_lower(w0 - c.mean_c).square().sum_cols() * -0.5 - lj.diag().ln().sum() - ld.sum_cols() - half_log_2pi;
    let eps_sq = Mat::from_fn(1, samples, |_, s| eps_u.column(s).norm_squared() + eps_f.column(s).norm_squared());
    let mut log_q = tape.constant(eps_sq * -0.5) - c.iv.s_factor.diag().square().ln().sum() * 0.5 - lc.diag().ln().sum()
        - half_log_2pi;
    if c.iv.whitened {
        log_q = log_q - c.l.diag().ln().sum();
    }
    let per_sample = log_p - log_q;
    let kl = checked(tape, -per_sample.mean(), Term::Kl)?;
    let penalty = tape.scalar(0.0);
    Ok(Terms { elbo: ell - kl, ell, kl, penalty, samples: Some(per_sample) })
}

fn dispatch<'t>(spec: &ModelSpec, tape: &'t Tape, x: &Mat, y: &[f64], n_total: usize, seed: u64) -> Result<Terms<'t>> {
    match spec.kind {
        ModelKind::Svgp => svgp_terms(spec, tape, x, y, n_total),
        ModelKind::Tgp => tgp_terms(spec, tape, x, y, n_total, seed),
        ModelKind::Vwgp => vwgp_terms(spec, tape, x, y, n_total),
        ModelKind::Gsp => {
            if n_total != y.len() {
                return Err(Error::Usage("G-SP is a full-batch bound".into()));
            }
            gsp_terms(spec, tape, x, y, spec.train_samples, seed)
        }
    }
}

fn evaluate(
    spec: &ModelSpec,
    build: impl for<'t> Fn(&'t Tape) -> Result<Terms<'t>>,
    grad: bool,
) -> Result<(BoundValues, Option<Vec<f64>>, Option<Vec<f64>>)> {
    let tape = Tape::new(&spec.params());
    let (vals, samples) = {
        let t = build(&tape)?;
        tape.set_loss(t.elbo)?;
        (t.values(), t.samples.map(|s| s.value().as_slice().to_vec()))
    };
    let g = if grad { Some(tape.backward()?) } else { None };
    Ok((vals, g, samples))
}

/// The bound for `spec.kind` on a minibatch, scaled to `n_total` points.
pub fn elbo(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize, seed: u64) -> Result<BoundValues> {
    check_batch(spec, x, y, n_total)?;
    Ok(evaluate(spec, |t| dispatch(spec, t, x, y, n_total, seed), false)?.0)
}

/// Bound values and the gradient of the ELBO with respect to `spec.params()`.
pub fn bound_and_grad(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize, seed: u64) -> Result<(BoundValues, Vec<f64>)> {
    check_batch(spec, x, y, n_total)?;
    let (v, g, _) = evaluate(spec, |t| dispatch(spec, t, x, y, n_total, seed), true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Transformed-prior bound computed by quadrature through the flow, whatever
/// `spec.kind` says.
pub fn elbo_tgp(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize, seed: u64) -> Result<f64> {
    check_batch(spec, x, y, n_total)?;
    Ok(evaluate(spec, |t| tgp_terms(spec, t, x, y, n_total, seed), false)?.0.elbo)
}

/// Closed-form Gaussian bound without any flow.
pub fn elbo_svgp(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize) -> Result<f64> {
    check_batch(spec, x, y, n_total)?;
    Ok(evaluate(spec, |t| svgp_terms(spec, t, x, y, n_total), false)?.0.elbo)
}

pub fn elbo_vwgp(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize) -> Result<f64> {
    check_batch(spec, x, y, n_total)?;
    Ok(evaluate(spec, |t| vwgp_terms(spec, t, x, y, n_total), false)?.0.elbo)
}

pub fn elbo_gsp(spec: &ModelSpec, x: &Mat, y: &[f64], samples: usize, seed: u64) -> Result<f64> {
    Ok(elbo_gsp_samples(spec, x, y, samples, seed)?.0)
}

/// G-SP bound together with the per-sample values of its Monte Carlo term.
pub fn elbo_gsp_samples(spec: &ModelSpec, x: &Mat, y: &[f64], samples: usize, seed: u64) -> Result<(f64, Vec<f64>)> {
    check_batch(spec, x, y, y.len())?;
    let (v, _, s) = evaluate(spec, |t| gsp_terms(spec, t, x, y, samples, seed), false)?;
    Ok((v.elbo, s.expect("G-SP records its samples")))
}

/// Largest relative disagreement between the tape gradient of [`elbo`] and
/// central differences. Each parameter takes the best of the step sizes
/// 1e-4, 1e-5 and 1e-6, so one badly conditioned step cannot dominate.
pub fn grad_check(spec: &ModelSpec, x: &Mat, y: &[f64], n_total: usize, seed: u64) -> Result<f64> {
    let (_, g) = bound_and_grad(spec, x, y, n_total, seed)?;
    let p = spec.params();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let mut best = f64::INFINITY;
        for h in [1e-4, 1e-5, 1e-6] {
            let mut q = p.clone();
            q[i] = p[i] + h;
            let hi = elbo(&spec.with_params(&q)?, x, y, n_total, seed)?.elbo;
            q[i] = p[i] - h;
            let lo = elbo(&spec.with_params(&q)?, x, y, n_total, seed)?.elbo;
            let c = (hi - lo) / (2.0 * h);
            best = best.min((g[i] - c).abs() / c.abs().max(1.0));
        }
        worst = worst.max(best);
    }
    Ok(worst)
}
