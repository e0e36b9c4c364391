//! Jittered Cholesky, Gauss-Hermite quadrature, Gaussian KL and logsumexp.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SQRT_PI: f64 = 1.772_453_850_905_516;
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSchedule {
    pub initial: f64,
    pub escalated: f64,
    pub max_attempts: usize,
}

impl Default for JitterSchedule {
    fn default() -> Self {
        JitterSchedule { initial: 1e-8, escalated: 1e-6, max_attempts: 2 }
    }
}

impl JitterSchedule {
    /// Jitter levels tried in order: geometric from `initial` up to `escalated`.
    pub fn levels(&self) -> Vec<f64> {
        let n = self.max_attempts.max(1);
        if n == 1 {
            return vec![self.initial];
        }
        let ratio = (self.escalated / self.initial).powf(1.0 / (n - 1) as f64);
        (0..n).map(|k| (self.initial * ratio.powi(k as i32)).min(self.escalated)).collect()
    }

    fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.escalated >= self.initial) {
            return Err(Error::Usage(format!("invalid jitter schedule {self:?}")));
        }
        Ok(())
    }
}

/// Lower Cholesky factor of `a + jitter I` for the first schedule level that succeeds.
pub fn cholesky_jittered(a: &DMatrix<f64>, schedule: &JitterSchedule) -> Result<(DMatrix<f64>, f64)> {
    schedule.validate()?;
    if a.nrows() != a.ncols() {
        return Err(Error::Usage(format!("cholesky of non-square {:?}", a.shape())));
    }
    let n = a.nrows();
    let mut last = schedule.initial;
    for jitter in schedule.levels() {
        last = jitter;
        let shifted = a + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(c) = shifted.cholesky() {
            return Ok((c.unpack(), jitter));
        }
    }
    Err(Error::NotPositiveDefinite { node: None, jitter: last })
}

/// Physicists' Gauss-Hermite rule for the weight `exp(-x^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Weights divided by sqrt(pi), i.e. probabilities under N(0, 1/2).
    pub fn normalized_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w / SQRT_PI).collect()
    }
}

fn golub_welsch(q: usize) -> QuadratureRule {
    let mut jacobi = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k, k - 1)] = off;
        jacobi[(k - 1, k)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], SQRT_PI * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // polish the nodes with Newton on the orthonormal Hermite recurrence and
    // recompute weights from it; the eigensolver alone loses digits in the tails
    for (x, w) in pairs.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = hermite_orthonormal(q, *x);
            *x -= p / dp;
        }
        let (_, dp) = hermite_orthonormal(q, *x);
        *w = 2.0 / (dp * dp);
    }
    // symmetrize
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if q % 2 == 1 {
        pairs[q / 2].0 = 0.0;
    }
    QuadratureRule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Orthonormal Hermite polynomial `h_q(x)` (weight `exp(-x^2)`) and its derivative.
fn hermite_orthonormal(q: usize, x: f64) -> (f64, f64) {
    let mut h_prev = 0.0;
    let mut h = std::f64::consts::PI.powf(-0.25);
    for k in 0..q {
        let kf = k as f64;
        let next = (2.0 / (kf + 1.0)).sqrt() * x * h - (kf / (kf + 1.0)).sqrt() * h_prev;
        h_prev = h;
        h = next;
    }
    (h, (2.0 * q as f64).sqrt() * h_prev)
}

static RULES: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();

/// Gauss-Hermite rule of order `q`, computed once per order and cached.
pub fn gh_nodes(q: usize) -> Result<Arc<QuadratureRule>> {
    if q < 2 {
        return Err(Error::Usage(format!("quadrature order must be >= 2, got {q}")));
    }
    let cache = RULES.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("quadrature cache poisoned");
    Ok(guard.entry(q).or_insert_with(|| Arc::new(golub_welsch(q))).clone())
}

/// `E[h(f)]` for `f ~ N(mean, variance)`.
pub fn expect_gh(h: impl Fn(f64) -> f64, mean: f64, variance: f64, rule: &QuadratureRule) -> Result<f64> {
    if variance < 0.0 {
        return Err(Error::Usage(format!("negative variance {variance}")));
    }
    let scale = (2.0 * variance).sqrt();
    Ok(rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w / SQRT_PI * h(mean + scale * x)).sum())
}

/// `KL[N(m1, s1) || N(m2, s2)]` via Cholesky factors.
pub fn kl_gaussians(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let k = m1.len();
    if m2.len() != k || s1.shape() != (k, k) || s2.shape() != (k, k) {
        return Err(Error::Usage("kl_gaussians: dimension mismatch".into()));
    }
    let factor = |s: &DMatrix<f64>| match s.clone().cholesky() {
        Some(c) => Ok(c.unpack()),
        None => cholesky_jittered(s, &JitterSchedule::default()).map(|r| r.0),
    };
    let l1 = factor(s1)?;
    let l2 = factor(s2)?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let a = l2.solve_lower_triangular(&l1).expect("nonsingular factor");
    let trace = a.norm_squared();
    let diff = m2 - m1;
    let b = l2.solve_lower_triangular(&diff).expect("nonsingular factor");
    Ok(0.5 * (trace + b.norm_squared() - k as f64 + logdet(&l2) - logdet(&l1)))
}

pub(crate) fn logsumexp_slice(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Usage("logsumexp of an empty list".into()));
    }
    Ok(logsumexp_slice(values))
}

/// Inverse of the standard normal CDF.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}
