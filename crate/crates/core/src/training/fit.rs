use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::models::{bound_and_grad, BoundValues, ModelKind, ModelSpec};

/// Jitter used once a Cholesky factorization has failed during a run.
pub(crate) const ESCALATED_JITTER: f64 = 1e-6;

/// Per-epoch averages of the minibatch bound estimates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub elbo: Vec<f64>,
    pub ell: Vec<f64>,
    pub kl: Vec<f64>,
    pub penalty: Vec<f64>,
    /// Wall time since the start of the run at the end of each epoch.
    pub seconds: Vec<f64>,
    pub jitter_escalations: Vec<usize>,
    pub steps: usize,
}

impl TrainTrace {
    fn push(&mut self, v: &BoundValues, count: usize, seconds: f64, escalations: usize) {
        let c = count as f64;
        self.elbo.push(v.elbo / c);
        self.ell.push(v.ell / c);
        self.kl.push(v.kl / c);
        self.penalty.push(v.penalty / c);
        self.seconds.push(seconds);
        self.jitter_escalations.push(escalations);
    }

    /// Mean wall time of one optimizer step.
    pub fn seconds_per_step(&self) -> f64 {
        match self.seconds.last() {
            Some(s) if self.steps > 0 => s / self.steps as f64,
            _ => 0.0,
        }
    }
}

/// Maximizes the bound of `spec.kind` with Adam on shuffled minibatches.
/// Targets are on the original scale; `spec.target` maps them to the
/// model's scale.
pub fn fit(spec: &ModelSpec, x: &Mat, y: &[f64], cfg: &TrainConfig) -> Result<(ModelSpec, TrainTrace)> {
    spec.validate()?;
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::Usage(format!("{n} inputs and {} targets", y.len())));
    }
    cfg.validate(n)?;
    let b = cfg.batch(n);
    if spec.kind == ModelKind::Gsp && b < n {
        return Err(Error::Usage("G-SP trains on the full data only".into()));
    }
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((spec.clone(), trace));
    }
    let ys = spec.target.apply(y);
    let layout = spec.layout();
    let mut params = spec.params();
    let mut opt = Adam::new(params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut jitter = spec.jitter;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let frozen = cfg.freeze.frozen(epoch, cfg.epochs);
        let trainable: Option<Vec<bool>> =
            (!frozen.is_empty()).then(|| layout.mask(&frozen).into_iter().map(|f| !f).collect());
        if b < n {
            order.shuffle(&mut rng);
        }
        let mut sum = BoundValues { elbo: 0.0, ell: 0.0, kl: 0.0, penalty: 0.0 };
        let mut escalations = 0;
        let mut count = 0;
        for (step, chunk) in order.chunks(b).enumerate() {
            let at = |e: Error| Error::AtStep { epoch, step, source: Box::new(e) };
            let step_seed: u64 = rng.random();
            let (xb, yb) = if b < n {
                (x.select_rows(chunk), chunk.iter().map(|&i| ys[i]).collect::<Vec<_>>())
            } else {
                (x.clone(), ys.clone())
            };
            let mut current = spec.with_params(&params).map_err(at)?;
            current.jitter = jitter;
            let (vals, grad) = match bound_and_grad(&current, &xb, &yb, n, step_seed) {
                Err(Error::NotPositiveDefinite { .. }) if jitter < ESCALATED_JITTER => {
                    jitter = ESCALATED_JITTER;
                    escalations += 1;
                    current.jitter = jitter;
                    bound_and_grad(&current, &xb, &yb, n, step_seed).map_err(at)?
                }
                r => r.map_err(at)?,
            };
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            match &trainable {
                Some(mask) => opt.step_masked(&mut params, &neg, mask),
                None => opt.step(&mut params, &neg),
            }
            .map_err(at)?;
            sum.elbo += vals.elbo;
            sum.ell += vals.ell;
            sum.kl += vals.kl;
            sum.penalty += vals.penalty;
            count += 1;
            trace.steps += 1;
        }
        let secs = start.elapsed().as_secs_f64();
        trace.push(&sum, count, secs, escalations);
        if cfg.progress {
            let k = trace.elbo.len() - 1;
            eprintln!("{epoch},{},{},{},{},{secs:.3}", trace.elbo[k], trace.ell[k], trace.kl[k], trace.penalty[k]);
        }
    }
    let mut out = spec.with_params(&params)?;
    out.jitter = jitter;
    Ok((out, trace))
}
