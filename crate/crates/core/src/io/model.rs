use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::flow_net::{FlowNet, NetConfig};
use crate::flows::FlowChain;
use crate::kernels::{KernelConfig, MeanConfig};
use crate::models::{FlowMode, Likelihood, ModelKind, ModelSpec, Standardization};
use crate::sparse_gp::InducingState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    kernel: KernelConfig,
    mean: MeanConfig,
    likelihood: Likelihood,
    flow: FlowChain,
    flow_mode: FlowMode,
    net: Option<NetConfig>,
    transform: FlowChain,
    transform_inverted: bool,
    whitened: bool,
    train_samples: usize,
    predict_samples: usize,
    train_quadrature: usize,
    predict_quadrature: usize,
    jitter: f64,
    target: Standardization,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Array {
    shape: Vec<usize>,
    /// Row-major.
    data: Vec<f64>,
}

impl Array {
    fn matrix(m: &Mat) -> Array {
        Array { shape: vec![m.nrows(), m.ncols()], data: m.transpose().as_slice().to_vec() }
    }

    fn vector(v: &[f64]) -> Array {
        Array { shape: vec![v.len()], data: v.to_vec() }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Format(format!("array '{name}' has shape {:?} but {} values", self.shape, self.data.len())));
        }
        Ok(())
    }

    fn to_matrix(&self, name: &str) -> Result<Mat> {
        self.check(name)?;
        match self.shape[..] {
            [r, c] => Ok(Mat::from_row_slice(r, c, &self.data)),
            _ => Err(Error::Format(format!("array '{name}' must be two-dimensional, has shape {:?}", self.shape))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    model: Header,
    arrays: BTreeMap<String, Array>,
}

pub fn model_to_json(spec: &ModelSpec) -> Result<String> {
    spec.validate()?;
    let mut arrays = BTreeMap::new();
    arrays.insert("inducing_inputs".to_string(), Array::matrix(&spec.inducing.z));
    arrays.insert("q_mean".to_string(), Array::vector(spec.inducing.m.as_slice()));
    arrays.insert("q_sqrt".to_string(), Array::matrix(&spec.inducing.s_factor));
    if let Some(net) = &spec.net {
        arrays.insert("net_weights".to_string(), Array::vector(&net.weights));
    }
    let doc = Document {
        format_version: FORMAT_VERSION,
        model: Header {
            kind: spec.kind,
            kernel: spec.kernel.clone(),
            mean: spec.mean,
            likelihood: spec.likelihood,
            flow: spec.flow.clone(),
            flow_mode: spec.flow_mode,
            net: spec.net.as_ref().map(|n| n.config.clone()),
            transform: spec.transform.clone(),
            transform_inverted: spec.transform_inverted,
            whitened: spec.inducing.whitened,
            train_samples: spec.train_samples,
            predict_samples: spec.predict_samples,
            train_quadrature: spec.train_quadrature,
            predict_quadrature: spec.predict_quadrature,
            jitter: spec.jitter,
            target: spec.target,
        },
        arrays,
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<ModelSpec> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("malformed or truncated model file: {e}")))?;
    match value.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Format(format!("unsupported format_version {v}; supported versions: {FORMAT_VERSION}")))
        }
        None => return Err(Error::Format(format!("missing format_version; supported versions: {FORMAT_VERSION}"))),
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let get = |name: &str| doc.arrays.get(name).ok_or_else(|| Error::Format(format!("missing array '{name}'")));
    let z = get("inducing_inputs")?.to_matrix("inducing_inputs")?;
    let q_mean = get("q_mean")?;
    q_mean.check("q_mean")?;
    let s_factor = get("q_sqrt")?.to_matrix("q_sqrt")?;
    let m = z.nrows();
    if q_mean.data.len() != m || s_factor.shape() != (m, m) {
        return Err(Error::Format(format!("variational arrays do not match {m} inducing points")));
    }
    let h = doc.model;
    let net = match (h.net, doc.arrays.get("net_weights")) {
        (Some(config), Some(w)) => {
            w.check("net_weights")?;
            Some(FlowNet { config, weights: w.data.clone() })
        }
        (None, None) => None,
        _ => return Err(Error::Format("network configuration and weights must appear together".into())),
    };
    let inducing = InducingState { z, m: Mat::from_column_slice(m, 1, &q_mean.data), s_factor, whitened: h.whitened };
    let spec = ModelSpec {
        kind: h.kind,
        kernel: h.kernel,
        mean: h.mean,
        inducing,
        flow: h.flow,
        flow_mode: h.flow_mode,
        net,
        likelihood: h.likelihood,
        transform: h.transform,
        transform_inverted: h.transform_inverted,
        train_samples: h.train_samples,
        predict_samples: h.predict_samples,
        train_quadrature: h.train_quadrature,
        predict_quadrature: h.predict_quadrature,
        jitter: h.jitter,
        target: h.target,
    };
    spec.validate().map_err(|e| Error::Format(format!("inconsistent model: {e}")))?;
    Ok(spec)
}

pub fn save_model(spec: &ModelSpec, path: &Path) -> Result<()> {
    write_atomic(path, model_to_json(spec)?.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    model_from_json(&text)
}
