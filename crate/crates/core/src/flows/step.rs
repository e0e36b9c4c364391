use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::kernels::inv_softplus;

/// Elementwise monotone map. Parameterized kinds list their slots in
/// [`StepKind::slots`]; positive slots are stored as `softplus^-1` of the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Log,
    Exp,
    Softplus,
    Sinh,
    /// `a asinh(b (x + c)) + d`
    Arcsinh,
    /// `a + b x`
    Affine,
    /// `sinh(b asinh(x) - a)`
    SinhArcsinh,
    /// `(sgn(x)|x|^l - 1) / l`
    BoxCox,
    /// `sgn(l x + 1)|l x + 1|^(1/l)`
    InverseBoxCox,
    /// `(exp(g x) - 1) / g * exp(h x^2 / 2)`
    Tukey,
    /// `a tanh(b (x + c)) + d`
    Tanh,
    /// `sum_i a_i + b_i asinh((x - c_i) / d_i)`
    ArcsinhMixture(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Free,
    Positive,
}

impl StepKind {
    pub fn slots(&self) -> Vec<Slot> {
        use Slot::*;
        match self {
            StepKind::Log | StepKind::Exp | StepKind::Softplus | StepKind::Sinh => vec![],
            StepKind::Arcsinh | StepKind::Tanh => vec![Positive, Positive, Free, Free],
            StepKind::Affine | StepKind::SinhArcsinh => vec![Free, Positive],
            StepKind::BoxCox | StepKind::InverseBoxCox => vec![Positive],
            StepKind::Tukey => vec![Free, Positive],
            StepKind::ArcsinhMixture(n) => (0..*n).flat_map(|_| [Free, Positive, Free, Positive]).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.slots().len()
    }

    /// Whether the map is a bijection of the whole real line.
    pub fn is_unconstrained(&self) -> bool {
        !matches!(self, StepKind::Log | StepKind::Exp | StepKind::Softplus | StepKind::Tanh)
    }

    pub fn has_closed_inverse(&self) -> bool {
        !matches!(self, StepKind::Tukey | StepKind::ArcsinhMixture(_))
    }

    pub fn name(&self) -> String {
        match self {
            StepKind::Log => "log".into(),
            StepKind::Exp => "exp".into(),
            StepKind::Softplus => "softplus".into(),
            StepKind::Sinh => "sinh".into(),
            StepKind::Arcsinh => "arcsinh".into(),
            StepKind::Affine => "affine".into(),
            StepKind::SinhArcsinh => "sinh-arcsinh".into(),
            StepKind::BoxCox => "boxcox".into(),
            StepKind::InverseBoxCox => "inverse-boxcox".into(),
            StepKind::Tukey => "tukey".into(),
            StepKind::Tanh => "tanh".into(),
            StepKind::ArcsinhMixture(n) => format!("arcsinh-mixture({n})"),
        }
    }

    /// Default constrained values.
    pub fn default_values(&self) -> Vec<f64> {
        match self {
            StepKind::Log | StepKind::Exp | StepKind::Softplus | StepKind::Sinh => vec![],
            StepKind::Arcsinh | StepKind::Tanh => vec![1.0, 1.0, 0.0, 0.0],
            StepKind::Affine => vec![0.0, 1.0],
            StepKind::SinhArcsinh => vec![0.0, 1.0],
            StepKind::BoxCox | StepKind::InverseBoxCox => vec![1.0],
            StepKind::Tukey => vec![0.5, 0.1],
            StepKind::ArcsinhMixture(n) => {
                let n = *n;
                (0..n)
                    .flat_map(|i| {
                        let c = if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
                        [0.0, 1.0 / n as f64, c, 1.0]
                    })
                    .collect()
            }
        }
    }

    /// Maps constrained values to stored (raw) values.
    pub fn to_raw(&self, values: &[f64]) -> Vec<f64> {
        self.slots()
            .iter()
            .zip(values)
            .map(|(s, &v)| match s {
                Slot::Free => v,
                Slot::Positive => inv_softplus(v),
            })
            .collect()
    }

    pub fn to_values(&self, raw: &[f64]) -> Vec<f64> {
        self.constrain(raw)
    }

    pub(crate) fn constrain<R: Real>(&self, raw: &[R]) -> Vec<R> {
        self.slots()
            .iter()
            .zip(raw)
            .map(|(s, &r)| match s {
                Slot::Free => r,
                Slot::Positive => r.softplus(),
            })
            .collect()
    }

    /// Forward map given constrained parameters.
    pub(crate) fn forward<R: Real>(&self, p: &[R], x: R) -> R {
        match self {
            StepKind::Log => x.ln(),
            StepKind::Exp => x.exp(),
            StepKind::Softplus => x.softplus(),
            StepKind::Sinh => x.sinh(),
            StepKind::Arcsinh => p[0] * (p[1] * (x + p[2])).asinh() + p[3],
            StepKind::Affine => p[0] + p[1] * x,
            StepKind::SinhArcsinh => (p[1] * x.asinh() - p[0]).sinh(),
            StepKind::BoxCox => (x.sign() * x.abs_pow(p[0]) - 1.0) / p[0],
            StepKind::InverseBoxCox => {
                let z = p[0] * x + 1.0;
                z.sign() * z.abs_pow(p[0].lift(1.0) / p[0])
            }
            StepKind::Tukey => {
                let (g, h) = (p[0], p[1]);
                ((g * x).exp() - 1.0) / g * (h * x.square() * 0.5).exp()
            }
            StepKind::Tanh => p[0] * (p[1] * (x + p[2])).tanh() + p[3],
            StepKind::ArcsinhMixture(n) => {
                let mut acc = p[0] + p[1] * ((x - p[2]) / p[3]).asinh();
                for i in 1..*n {
                    let q = &p[4 * i..4 * i + 4];
                    acc = acc + q[0] + q[1] * ((x - q[2]) / q[3]).asinh();
                }
                acc
            }
        }
    }

    /// `log |dG/dx|` in closed form, given constrained parameters.
    pub(crate) fn log_deriv<R: Real>(&self, p: &[R], x: R) -> R {
        match self {
            StepKind::Log => -x.ln(),
            StepKind::Exp => x,
            StepKind::Softplus => -(-x).softplus(),
            StepKind::Sinh => x.log_cosh(),
            StepKind::Arcsinh => {
                let u = p[1] * (x + p[2]);
                p[0].ln() + p[1].ln() - (u.square() + 1.0).ln() * 0.5
            }
            StepKind::Affine => p[1].ln(),
            StepKind::SinhArcsinh => {
                let s = p[1] * x.asinh() - p[0];
                p[1].ln() + s.log_cosh() - (x.square() + 1.0).ln() * 0.5
            }
            StepKind::BoxCox => (p[0] - 1.0) * x.abs().ln(),
            StepKind::InverseBoxCox => (p[0].lift(1.0) / p[0] - 1.0) * (p[0] * x + 1.0).abs().ln(),
            StepKind::Tukey => {
                let (g, h) = (p[0], p[1]);
                let e = (g * x).exp();
                h * x.square() * 0.5 + (e + h * x * (e - 1.0) / g).ln()
            }
            StepKind::Tanh => {
                let u = p[1] * (x + p[2]);
                p[0].ln() + p[1].ln() - u.log_cosh() * 2.0
            }
            StepKind::ArcsinhMixture(n) => {
                let term = |q: &[R]| {
                    let v = (x - q[2]) / q[3];
                    q[1] / q[3] / (v.square() + 1.0).sqrt()
                };
                let mut acc = term(&p[0..4]);
                for i in 1..*n {
                    acc = acc + term(&p[4 * i..4 * i + 4]);
                }
                acc.ln()
            }
        }
    }

    /// Closed-form inverse when one exists. Values outside the step's range
    /// produce NaN entries, which callers check for beforehand.
    pub(crate) fn inverse_closed<R: Real>(&self, p: &[R], y: R) -> Option<R> {
        Some(match self {
            StepKind::Log => y.exp(),
            StepKind::Exp => y.ln(),
            StepKind::Softplus => y + (-((-y).exp()) + 1.0).ln(),
            StepKind::Sinh => y.asinh(),
            StepKind::Arcsinh => ((y - p[3]) / p[0]).sinh() / p[1] - p[2],
            StepKind::Affine => (y - p[0]) / p[1],
            StepKind::SinhArcsinh => ((y.asinh() + p[0]) / p[1]).sinh(),
            StepKind::BoxCox => {
                let z = p[0] * y + 1.0;
                z.sign() * z.abs_pow(p[0].lift(1.0) / p[0])
            }
            StepKind::InverseBoxCox => (y.sign() * y.abs_pow(p[0]) - 1.0) / p[0],
            StepKind::Tanh => ((y - p[3]) / p[0]).atanh() / p[1] - p[2],
            StepKind::Tukey | StepKind::ArcsinhMixture(_) => return None,
        })
    }

    /// Open interval `(lo, hi)` of attainable outputs given constrained scalar parameters.
    pub(crate) fn range(&self, p: &[f64]) -> (f64, f64) {
        match self {
            StepKind::Exp | StepKind::Softplus => (0.0, f64::INFINITY),
            StepKind::Tanh => (p[3] - p[0], p[3] + p[0]),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Open interval of admissible inputs.
    pub(crate) fn domain(&self) -> (f64, f64) {
        match self {
            StepKind::Log => (0.0, f64::INFINITY),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}
