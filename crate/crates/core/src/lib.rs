//! Sparse variational Gaussian processes with marginal normalizing flows on
//! the prior (transformed GPs) or on the targets (warped GPs).

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod flow_net;
pub mod flows;
pub mod io;
pub mod kernels;
pub mod models;
pub mod numstats;
pub mod sparse_gp;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
