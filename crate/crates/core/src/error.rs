use thiserror::Error;

/// Which part of a bound produced a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Ell,
    Kl,
    Penalty,
    Jacobian,
    Other,
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Term::Ell => "ELL",
            Term::Kl => "KL",
            Term::Penalty => "penalty",
            Term::Jacobian => "jacobian",
            Term::Other => "other",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("non-finite value at node {node}{}", term.map(|t| format!(" (term {t})")).unwrap_or_default())]
    NonFiniteValue { node: usize, term: Option<Term> },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("matrix is not positive definite (node {node:?}, jitter {jitter:e})")]
    NotPositiveDefinite { node: Option<usize>, jitter: f64 },

    #[error("value {value} outside the domain of flow step {step}")]
    Domain { step: usize, value: f64 },

    #[error("value {value} outside the range of flow step {step}")]
    Range { step: usize, value: f64 },

    #[error("zero derivative in flow step {step} at {value}")]
    SingularJacobian { step: usize, value: f64 },

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("flow does not map the real line onto itself: {0}")]
    FlowNotUnconstrained(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("epoch {epoch}, step {step}: {source}")]
    AtStep { epoch: usize, step: usize, source: Box<Error> },
}

impl Error {
    /// Errors caused by bad input rather than by numerics.
    pub fn is_validation(&self) -> bool {
        if let Error::AtStep { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Usage(_)
                | Error::Schema(_)
                | Error::Validation(_)
                | Error::Format(_)
                | Error::Io(_)
                | Error::FlowNotUnconstrained(_)
        )
    }

    /// The innermost error, past any training context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn with_term(self, term: Term) -> Self {
        match self {
            Error::NonFiniteValue { node, term: None } => Error::NonFiniteValue { node, term: Some(term) },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
