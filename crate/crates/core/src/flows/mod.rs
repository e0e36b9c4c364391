//! Invertible elementwise flows and their compositions.
//!
//! A [`FlowChain`] applies its steps in order, step 0 first. Parameters live
//! in one flat raw vector (positive slots stored through `softplus^-1`), so the
//! same chain can be evaluated with literal parameters or with per-point
//! parameters produced by a network.

mod init;
mod step;

pub use init::{init_gaussianize, init_gaussianize_forward, init_identity, GaussianizeOptions, IdentityOptions, InitReport};
pub use step::{Slot, StepKind};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowStep {
    pub kind: StepKind,
    /// Unconstrained storage, one entry per slot.
    pub raw: Vec<f64>,
}

impl FlowStep {
    pub fn new(kind: StepKind) -> Self {
        FlowStep { kind, raw: kind.to_raw(&kind.default_values()) }
    }

    /// Builds a step from constrained (natural) parameter values.
    pub fn with_values(kind: StepKind, values: &[f64]) -> Result<Self> {
        if values.len() != kind.num_params() {
            return Err(Error::Usage(format!(
                "{} takes {} parameters, got {}",
                kind.name(),
                kind.num_params(),
                values.len()
            )));
        }
        for (s, v) in kind.slots().iter().zip(values) {
            if !v.is_finite() || (*s == Slot::Positive && *v <= 0.0) {
                return Err(Error::Usage(format!("{}: parameter {v} violates monotonicity constraints", kind.name())));
            }
        }
        if kind == StepKind::Tukey && values[0] == 0.0 {
            return Err(Error::Usage("tukey: g must be non-zero".into()));
        }
        Ok(FlowStep { kind, raw: kind.to_raw(values) })
    }

    pub fn values(&self) -> Vec<f64> {
        self.kind.to_values(&self.raw)
    }

    pub fn sal() -> [FlowStep; 2] {
        [FlowStep::new(StepKind::SinhArcsinh), FlowStep::new(StepKind::Affine)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-10, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowChain {
    pub steps: Vec<FlowStep>,
}

impl FlowChain {
    pub fn identity() -> Self {
        FlowChain { steps: vec![] }
    }

    pub fn new(steps: Vec<FlowStep>) -> Self {
        FlowChain { steps }
    }

    /// Parses a preset such as `sal`, `sal3`, `sal+sp`, `tanh`, `arcsinh-mixture(4)`.
    pub fn parse(preset: &str) -> Result<Self> {
        let preset = preset.trim();
        if preset.is_empty() || preset == "identity" || preset == "none" {
            return Ok(FlowChain::identity());
        }
        let mut steps = Vec::new();
        for token in preset.split('+').map(str::trim) {
            let simple = |k: StepKind| vec![FlowStep::new(k)];
            let mut add = match token {
                "sal" => FlowStep::sal().to_vec(),
                "sa" | "sinh-arcsinh" => simple(StepKind::SinhArcsinh),
                "sp" | "softplus" => simple(StepKind::Softplus),
                "l" | "affine" | "linear" => simple(StepKind::Affine),
                "tanh" => simple(StepKind::Tanh),
                "arcsinh" => simple(StepKind::Arcsinh),
                "boxcox" => simple(StepKind::BoxCox),
                "inverse-boxcox" => simple(StepKind::InverseBoxCox),
                "tukey" => simple(StepKind::Tukey),
                "log" => simple(StepKind::Log),
                "exp" => simple(StepKind::Exp),
                "sinh" => simple(StepKind::Sinh),
                t if t.starts_with("sal") => {
                    let k: usize = t[3..].parse().map_err(|_| Error::Usage(format!("unknown flow preset '{t}'")))?;
                    if k == 0 {
                        return Err(Error::Usage("sal0 has no steps".into()));
                    }
                    (0..k).flat_map(|_| FlowStep::sal()).collect()
                }
                t if t.starts_with("arcsinh-mixture(") && t.ends_with(')') => {
                    let n: usize = t["arcsinh-mixture(".len()..t.len() - 1]
                        .parse()
                        .map_err(|_| Error::Usage(format!("bad mixture size in '{t}'")))?;
                    if n == 0 {
                        return Err(Error::Usage("arcsinh-mixture needs at least one component".into()));
                    }
                    simple(StepKind::ArcsinhMixture(n))
                }
                t => return Err(Error::Usage(format!("unknown flow preset '{t}'"))),
            };
            steps.append(&mut add);
        }
        Ok(FlowChain { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.steps.iter().map(|s| s.kind.num_params()).sum()
    }

    pub fn raw_params(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.raw.iter().copied()).collect()
    }

    pub fn with_raw_params(&self, raw: &[f64]) -> Result<Self> {
        if raw.len() != self.num_params() {
            return Err(Error::Usage(format!("flow expects {} parameters, got {}", self.num_params(), raw.len())));
        }
        let mut out = self.clone();
        let mut off = 0;
        for s in &mut out.steps {
            let n = s.kind.num_params();
            s.raw = raw[off..off + n].to_vec();
            off += n;
        }
        Ok(out)
    }

    /// Whether every step is a bijection of the real line.
    pub fn is_unconstrained(&self) -> bool {
        self.steps.iter().all(|s| s.kind.is_unconstrained())
    }

    /// Slot constraint of every flat parameter.
    pub fn slots(&self) -> Vec<Slot> {
        self.steps.iter().flat_map(|s| s.kind.slots()).collect()
    }

    pub fn describe(&self) -> String {
        if self.steps.is_empty() {
            return "identity".into();
        }
        self.steps.iter().map(|s| s.kind.name()).collect::<Vec<_>>().join("+")
    }

    /// Chain output and summed log-derivative, with raw parameters supplied
    /// as values of the evaluation context (scalars or broadcastable columns).
    pub fn forward_log_deriv_r<R: Real>(&self, x: R, raw: &[R]) -> Result<(R, R)> {
        self.check_len(raw.len())?;
        let (r, c) = x.shape();
        let mut ld = x.constant_like(r, c, vec![0.0; r * c]);
        let mut x = x;
        let mut off = 0;
        for (k, s) in self.steps.iter().enumerate() {
            let n = s.kind.num_params();
            let p = s.kind.constrain(&raw[off..off + n]);
            off += n;
            check_domain(k, s.kind, &x)?;
            ld = ld + s.kind.log_deriv(&p, x);
            x = s.kind.forward(&p, x);
        }
        Ok((x, ld))
    }

    pub fn forward_r<R: Real>(&self, x: R, raw: &[R]) -> Result<R> {
        self.check_len(raw.len())?;
        let mut x = x;
        let mut off = 0;
        for (k, s) in self.steps.iter().enumerate() {
            let n = s.kind.num_params();
            let p = s.kind.constrain(&raw[off..off + n]);
            off += n;
            check_domain(k, s.kind, &x)?;
            x = s.kind.forward(&p, x);
        }
        Ok(x)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.num_params() {
            return Err(Error::Usage(format!("flow expects {} parameters, got {}", self.num_params(), n)));
        }
        Ok(())
    }

    /// Scalar forward with the chain's own parameters.
    pub fn forward_scalar(&self, x: f64) -> Result<f64> {
        self.forward_r(x, &self.raw_params())
    }

    /// Scalar inverse with explicit raw parameters: closed forms where
    /// available, bracketed Newton otherwise.
    pub fn inverse_scalar_with(&self, y: f64, raw: &[f64], opts: &NewtonOptions) -> Result<f64> {
        self.check_len(raw.len())?;
        let mut offs = Vec::with_capacity(self.steps.len());
        let mut off = 0;
        for s in &self.steps {
            offs.push(off);
            off += s.kind.num_params();
        }
        let mut y = y;
        for (k, s) in self.steps.iter().enumerate().rev() {
            let n = s.kind.num_params();
            let p = s.kind.constrain(&raw[offs[k]..offs[k] + n]);
            let (lo, hi) = s.kind.range(&p);
            if !(y > lo && y < hi) || y.is_nan() {
                return Err(Error::Range { step: k, value: y });
            }
            y = match s.kind.inverse_closed(&p, y) {
                Some(x) => x,
                None => newton_step_inverse(s.kind, &p, y, k, opts)?,
            };
            let (dlo, dhi) = s.kind.domain();
            if !y.is_finite() || !(y > dlo && y < dhi) {
                return Err(Error::Range { step: k, value: y });
            }
        }
        Ok(y)
    }

    pub fn inverse_scalar(&self, y: f64) -> Result<f64> {
        self.inverse_scalar_with(y, &self.raw_params(), &NewtonOptions::default())
    }

    /// Inverse on the tape. The preimage is found numerically and then passed
    /// through one implicit Newton correction, which leaves the value in
    /// place and carries exact first derivatives with respect to `y` and the
    /// parameters.
    pub fn inverse_var<'t>(&self, y: Var<'t>, raw: &[Var<'t>], opts: &NewtonOptions) -> Result<Var<'t>> {
        self.check_len(raw.len())?;
        let tape: &'t Tape = y.tape();
        let yv = y.value();
        let (r, c) = yv.shape();
        let rawv: Vec<Mat> = raw.iter().map(|v| v.value()).collect();
        for v in &rawv {
            if (v.nrows() != 1 && v.nrows() != r) || (v.ncols() != 1 && v.ncols() != c) {
                return Err(Error::Usage(format!("flow parameter shape {:?} does not broadcast to {:?}", v.shape(), (r, c))));
            }
        }
        let mut x0 = Mat::zeros(r, c);
        let mut p = vec![0.0; raw.len()];
        for j in 0..c {
            for i in 0..r {
                for (k, v) in rawv.iter().enumerate() {
                    p[k] = v[(if v.nrows() == 1 { 0 } else { i }, if v.ncols() == 1 { 0 } else { j })];
                }
                x0[(i, j)] = self.inverse_scalar_with(yv[(i, j)], &p, opts)?;
            }
        }
        if self.steps.is_empty() {
            return Ok(y);
        }
        let xs = tape.constant(x0);
        let (g, ld) = self.forward_log_deriv_r(xs, raw)?;
        Ok(xs - (g - y) / ld.exp())
    }
}

fn check_domain<R: Real>(k: usize, kind: StepKind, x: &R) -> Result<()> {
    let (lo, hi) = kind.domain();
    if lo > f64::NEG_INFINITY || hi < f64::INFINITY {
        for v in x.values() {
            if !(v > lo && v < hi) {
                return Err(Error::Domain { step: k, value: v });
            }
        }
    }
    Ok(())
}

fn newton_step_inverse(kind: StepKind, p: &[f64], y: f64, step: usize, opts: &NewtonOptions) -> Result<f64> {
    let f = |x: f64| kind.forward(p, x) - y;
    // bracket by expanding outwards from the origin
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    let mut expand = 0;
    while f(lo) > 0.0 {
        hi = lo;
        lo *= 2.0;
        expand += 1;
        if expand > 1100 || !f(lo).is_finite() {
            return Err(Error::Range { step, value: y });
        }
    }
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        expand += 1;
        if expand > 1100 || !f(hi).is_finite() {
            return Err(Error::Range { step, value: y });
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..opts.max_iter {
        let fx = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let d = kind.log_deriv(p, x).exp();
        let mut next = x - fx / d;
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= opts.tol || hi - lo <= opts.tol {
            return Ok(next);
        }
        x = next;
    }
    Err(Error::Convergence(format!("{} inverse at {y} did not converge in {} iterations", kind.name(), opts.max_iter)))
}

/// Raw parameters of row `i`: the chain's own, or row `i` of `per_point`.
fn row_params(chain: &FlowChain, per_point: Option<&Mat>, n: usize, i: usize) -> Result<Vec<f64>> {
    match per_point {
        None => Ok(chain.raw_params()),
        Some(m) => {
            if m.nrows() != n || m.ncols() != chain.num_params() {
                return Err(Error::Usage(format!(
                    "per-point parameters must be {}x{}, got {:?}",
                    n,
                    chain.num_params(),
                    m.shape()
                )));
            }
            Ok(m.row(i).iter().copied().collect())
        }
    }
}

/// Applies the chain to each value.
pub fn flow_forward(chain: &FlowChain, f0: &[f64], per_point: Option<&Mat>) -> Result<Vec<f64>> {
    (0..f0.len())
        .map(|i| chain.forward_r(f0[i], &row_params(chain, per_point, f0.len(), i)?))
        .collect()
}

/// Per-element `log |dG/df|` of the whole chain, differentiated step by step
/// on the tape.
pub fn flow_log_deriv(chain: &FlowChain, f0: &[f64], per_point: Option<&Mat>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(f0.len());
    for (i, &x0) in f0.iter().enumerate() {
        let raw = row_params(chain, per_point, f0.len(), i)?;
        let mut x = x0;
        let mut total = 0.0;
        let mut off = 0;
        for (k, s) in chain.steps.iter().enumerate() {
            let n = s.kind.num_params();
            let p = s.kind.to_values(&raw[off..off + n]);
            off += n;
            check_domain(k, s.kind, &x)?;
            let tape = Tape::new(&[x]);
            let v = tape.param(0, 1, 1);
            let pv: Vec<Var> = p.iter().map(|&q| tape.scalar(q)).collect();
            let y = s.kind.forward(&pv, v);
            let yv = tape.set_loss(y)?;
            let d = tape.backward()?[0];
            if d == 0.0 {
                return Err(Error::SingularJacobian { step: k, value: x });
            }
            total += d.abs().ln();
            x = yv;
        }
        out.push(total);
    }
    Ok(out)
}

pub fn flow_inverse(chain: &FlowChain, fk: &[f64], per_point: Option<&Mat>, opts: &NewtonOptions) -> Result<Vec<f64>> {
    (0..fk.len())
        .map(|i| chain.inverse_scalar_with(fk[i], &row_params(chain, per_point, fk.len(), i)?, opts))
        .collect()
}
