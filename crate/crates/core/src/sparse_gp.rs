//! Inducing points, the Gaussian `q(u0)`, its projection onto `q(f0)`, and
//! the inducing KL term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::numstats::JitterSchedule;

/// Smallest variance handed to square roots downstream; keeps adjoints finite.
pub(crate) const VAR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct InducingState {
    /// M×D locations.
    pub z: Mat,
    /// M×1 variational mean.
    pub m: Mat,
    /// Lower-triangular M×M factor with `S = factor factor^T`.
    pub s_factor: Mat,
    pub whitened: bool,
}

impl InducingState {
    /// `m = 0`, `S = 1e-5 I`.
    pub fn new(z: Mat, whitened: bool) -> Self {
        let m = z.nrows();
        InducingState { z, m: Mat::zeros(m, 1), s_factor: Mat::identity(m, m) * 1e-5f64.sqrt(), whitened }
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn s(&self) -> Mat {
        &self.s_factor * self.s_factor.transpose()
    }

    /// Number of flat parameters: Z, m, then the lower triangle of the factor.
    pub fn num_params(&self) -> usize {
        let (m, d) = self.z.shape();
        m * d + m + m * (m + 1) / 2
    }

    pub fn flat(&self) -> Vec<f64> {
        let (mm, d) = self.z.shape();
        let mut out = Vec::with_capacity(self.num_params());
        for i in 0..mm {
            for j in 0..d {
                out.push(self.z[(i, j)]);
            }
        }
        out.extend(self.m.iter().copied());
        for i in 0..mm {
            for j in 0..=i {
                out.push(self.s_factor[(i, j)]);
            }
        }
        out
    }

    pub fn with_flat(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(Error::Usage(format!("inducing state expects {} values, got {}", self.num_params(), p.len())));
        }
        let (mm, d) = self.z.shape();
        let z = Mat::from_row_slice(mm, d, &p[..mm * d]);
        let m = Mat::from_column_slice(mm, 1, &p[mm * d..mm * d + mm]);
        let mut s_factor = Mat::zeros(mm, mm);
        let mut k = mm * d + mm;
        for i in 0..mm {
            for j in 0..=i {
                s_factor[(i, j)] = p[k];
                k += 1;
            }
        }
        Ok(InducingState { z, m, s_factor, whitened: self.whitened })
    }

    /// Records Z, m and the S factor as parameters starting at `offset`.
    pub fn vars<'t>(&self, tape: &'t Tape, offset: usize) -> InducingVars<'t> {
        let (mm, d) = self.z.shape();
        let z = tape.param(offset, mm, d);
        let m = tape.param(offset + mm * d, mm, 1);
        let base = offset + mm * d + mm;
        let mut index = Vec::with_capacity(mm * mm);
        let mut k = base;
        let mut row_start = vec![0; mm];
        for (i, r) in row_start.iter_mut().enumerate() {
            *r = k;
            k += i + 1;
        }
        for i in 0..mm {
            for j in 0..mm {
                index.push((j <= i).then_some(row_start[i] + j));
            }
        }
        let s_factor = tape.param_gather(mm, mm, index);
        InducingVars { z, m, s_factor, whitened: self.whitened }
    }

    /// Same quantities as constants (no gradient).
    pub fn constants<'t>(&self, tape: &'t Tape) -> InducingVars<'t> {
        InducingVars {
            z: tape.constant(self.z.clone()),
            m: tape.constant(self.m.clone()),
            s_factor: tape.constant(self.s_factor.clone()),
            whitened: self.whitened,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InducingVars<'t> {
    pub z: Var<'t>,
    pub m: Var<'t>,
    pub s_factor: Var<'t>,
    pub whitened: bool,
}

/// Cholesky factor of `K(Z, Z) + jitter I` on the tape.
pub fn kzz_factor<'t>(kernel: &KernelConfig, ku: Var<'t>, iv: &InducingVars<'t>, jitter: f64) -> Var<'t> {
    let tape = ku.tape();
    let mm = iv.z.nrows();
    let kzz = kernel.matrix_var(ku, iv.z, None) + tape.constant(Mat::identity(mm, mm) * jitter);
    kzz.cholesky()
}

/// `(A^T, L^-1 K_ZX)` where `A = K_XZ K_ZZ^-1` (unwhitened) or `K_XZ L^-T` (whitened).
pub fn projection<'t>(kernel: &KernelConfig, ku: Var<'t>, iv: &InducingVars<'t>, l: Var<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
    let kzx = kernel.matrix_var(ku, iv.z, Some(x));
    let b = l.solve_lower(kzx);
    let at = if iv.whitened { b } else { l.solve_lower_t(b) };
    (at, b)
}

/// Per-point mean and variance of `q(f0)` as B×1 columns. `mean_c` is the
/// constant prior mean (a 1×1 node).
pub fn marginals_var<'t>(
    kernel: &KernelConfig,
    ku: Var<'t>,
    mean_c: Var<'t>,
    iv: &InducingVars<'t>,
    l: Var<'t>,
    x: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let (at, b) = projection(kernel, ku, iv, l, x);
    let mu = at.t().matmul(iv.m) + mean_c;
    let kxx = kernel.diag_var(ku, x);
    let qxx = b.square().sum_cols().t();
    let sxx = iv.s_factor.t().matmul(at).square().sum_cols().t();
    let var = (kxx - qxx + sxx).clamp_min(VAR_FLOOR);
    (mu, var)
}

/// `KL[q(u0) || p(u0)]` on the tape.
pub fn kl_var<'t>(iv: &InducingVars<'t>, l: Var<'t>) -> Var<'t> {
    let mm = iv.m.nrows() as f64;
    let logdet_s = iv.s_factor.diag().square().ln().sum();
    if iv.whitened {
        (iv.s_factor.square().sum() + iv.m.square().sum() - mm - logdet_s) * 0.5
    } else {
        let a = l.solve_lower(iv.s_factor);
        let b = l.solve_lower(iv.m);
        let logdet_k = l.diag().ln().sum() * 2.0;
        (a.square().sum() + b.square().sum() - mm + logdet_k - logdet_s) * 0.5
    }
}

/// Full `q(f0)` mean (B×1) and covariance (B×B) on the tape.
pub fn joint_var<'t>(
    kernel: &KernelConfig,
    ku: Var<'t>,
    mean_c: Var<'t>,
    iv: &InducingVars<'t>,
    l: Var<'t>,
    x: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let (at, b) = projection(kernel, ku, iv, l, x);
    let mu = at.t().matmul(iv.m) + mean_c;
    let kxx = kernel.matrix_var(ku, x, None);
    let sa = iv.s_factor.t().matmul(at);
    let cov = kxx - b.t().matmul(b) + sa.t().matmul(sa);
    (mu, cov)
}

fn with_jitter<T>(schedule: &JitterSchedule, f: impl Fn(f64) -> Result<T>) -> Result<T> {
    let mut last = None;
    for j in schedule.levels() {
        match f(j) {
            Err(Error::NotPositiveDefinite { .. }) => last = Some(j),
            other => return other,
        }
    }
    Err(Error::NotPositiveDefinite { node: None, jitter: last.unwrap_or(schedule.initial) })
}

fn check_inputs(kernel: &KernelConfig, state: &InducingState, x: Option<&Mat>) -> Result<()> {
    let d = state.z.ncols();
    if state.z.nrows() == 0 {
        return Err(Error::Usage("need at least one inducing point".into()));
    }
    if x.is_some_and(|x| x.ncols() != d) || kernel.input_dim().is_some_and(|k| k != d) {
        return Err(Error::Usage("input dimension mismatch between data, inducing points and kernel".into()));
    }
    Ok(())
}

/// Evaluates a tape expression over constant inputs under the default
/// jitter schedule.
fn eval_const<T>(
    kernel: &KernelConfig,
    state: &InducingState,
    schedule: &JitterSchedule,
    f: impl for<'t> Fn(&'t Tape, Var<'t>, &InducingVars<'t>, Var<'t>) -> T,
) -> Result<T> {
    with_jitter(schedule, |j| {
        let tape = Tape::new(&kernel.unconstrained());
        let ku = tape.param(0, kernel.num_params(), 1);
        let iv = state.constants(&tape);
        let l = kzz_factor(kernel, ku, &iv, j);
        let out = f(&tape, ku, &iv, l);
        match tape.error() {
            Some(e) => Err(e),
            None => Ok(out),
        }
    })
}

/// Per-point `(mean, variance)` of `q(f0)` at the rows of `x`.
pub fn q_f0_marginals(kernel: &KernelConfig, mean_c: f64, state: &InducingState, x: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    marginals_with(kernel, mean_c, state, x, &JitterSchedule::default())
}

pub(crate) fn marginals_with(
    kernel: &KernelConfig,
    mean_c: f64,
    state: &InducingState,
    x: &Mat,
    schedule: &JitterSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(kernel, state, Some(x))?;
    eval_const(kernel, state, schedule, |t, ku, iv, l| {
        let (mu, var) = marginals_var(kernel, ku, t.scalar(mean_c), iv, l, t.constant(x.clone()));
        let var = var.value().map(|v| if v <= VAR_FLOOR { 0.0 } else { v });
        (mu.value().as_slice().to_vec(), var.as_slice().to_vec())
    })
}

/// Mean vector and full covariance of `q(f0)` at the rows of `x`.
pub fn q_f0_joint(kernel: &KernelConfig, mean_c: f64, state: &InducingState, x: &Mat) -> Result<(Vec<f64>, Mat)> {
    check_inputs(kernel, state, Some(x))?;
    eval_const(kernel, state, &JitterSchedule::default(), |t, ku, iv, l| {
        let (mu, cov) = joint_var(kernel, ku, t.scalar(mean_c), iv, l, t.constant(x.clone()));
        let c = cov.value();
        (mu.value().as_slice().to_vec(), (&c + c.transpose()) * 0.5)
    })
}

pub fn kl_inducing(kernel: &KernelConfig, state: &InducingState) -> Result<f64> {
    check_inputs(kernel, state, None)?;
    eval_const(kernel, state, &JitterSchedule::default(), |_, _, iv, l| kl_var(iv, l).item())
}

/// Lloyd's algorithm with k-means++ seeding; the restart with the lowest
/// within-cluster sum of squares wins.
pub fn init_inducing_kmeans(x: &Mat, m: usize, runs: usize, seed: u64) -> Result<Mat> {
    Ok(kmeans(x, m, runs, seed)?.0)
}

/// Centroids and their within-cluster sum of squares.
pub fn kmeans(x: &Mat, m: usize, runs: usize, seed: u64) -> Result<(Mat, f64)> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(Error::Usage(format!("cannot place {m} inducing points among {n} rows")));
    }
    if runs == 0 {
        return Err(Error::Usage("kmeans needs at least one run".into()));
    }
    if m == n {
        return Ok((x.clone(), 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Mat, f64)> = None;
    for _ in 0..runs {
        let (c, w) = lloyd(x, kmeans_pp(x, m, &mut rng), 300);
        if best.as_ref().is_none_or(|b| w < b.1) {
            best = Some((c, w));
        }
    }
    Ok(best.expect("at least one run"))
}

fn sq_dist(x: &Mat, i: usize, c: &Mat, k: usize) -> f64 {
    (0..x.ncols()).map(|d| (x[(i, d)] - c[(k, d)]).powi(2)).sum()
}

fn kmeans_pp(x: &Mat, m: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = x.nrows();
    let mut centers = Mat::zeros(m, x.ncols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x, i, &centers, 0)).collect();
    for k in 1..m {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        };
        centers.row_mut(k).copy_from(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x, i, &centers, k));
        }
    }
    centers
}

fn lloyd(x: &Mat, mut centers: Mat, max_iter: usize) -> (Mat, f64) {
    let (n, d) = x.shape();
    let m = centers.nrows();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let k = (0..m).min_by(|&p, &q| sq_dist(x, i, &centers, p).total_cmp(&sq_dist(x, i, &centers, q))).unwrap();
            if *a != k {
                *a = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Mat::zeros(m, d);
        let mut counts = vec![0usize; m];
        for (i, &k) in assign.iter().enumerate() {
            counts[k] += 1;
            for j in 0..d {
                sums[(k, j)] += x[(i, j)];
            }
        }
        for k in 0..m {
            if counts[k] == 0 {
                // reseed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&p, &q| sq_dist(x, p, &centers, assign[p]).total_cmp(&sq_dist(x, q, &centers, assign[q])))
                    .unwrap();
                centers.row_mut(k).copy_from(&x.row(far));
                assign[far] = k;
            } else {
                for j in 0..d {
                    centers[(k, j)] = sums[(k, j)] / counts[k] as f64;
                }
            }
        }
    }
    let wcss = (0..n)
        .map(|i| (0..m).map(|k| sq_dist(x, i, &centers, k)).fold(f64::INFINITY, f64::min))
        .sum();
    (centers, wcss)
}
