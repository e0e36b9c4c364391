use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_csv, Column, Dataset};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::eval::FoldSpec;
use crate::flow_net::{Activation, FlowNet, NetConfig};
use crate::flows::FlowChain;
use crate::kernels::{KernelConfig, MeanConfig};
use crate::models::{FlowMode, Likelihood, ModelKind, ModelSpec};
use crate::sparse_gp::InducingState;
use crate::synth::{generate, SynthSpec};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Default for NetSection {
    fn default() -> Self {
        let c = NetConfig::new(1, 1);
        NetSection { hidden: c.hidden, activation: c.activation, dropout: c.dropout, weight_decay: c.weight_decay }
    }
}

fn default_likelihood() -> Likelihood {
    Likelihood::Gaussian { variance: 0.05 }
}

fn default_inducing() -> usize {
    20
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Prior flow preset such as `sal` or `tanh`.
    #[serde(default)]
    pub flow: Option<String>,
    /// Defaults to `fixed` when a flow is given, `none` otherwise.
    #[serde(default)]
    pub flow_mode: Option<FlowMode>,
    #[serde(default)]
    pub net: NetSection,
    /// Defaults to an RBF kernel with one lengthscale per input column.
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub mean: MeanConfig,
    #[serde(default = "default_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default = "default_inducing")]
    pub num_inducing: usize,
    #[serde(default = "yes")]
    pub whitened: bool,
    /// Likelihood transform preset (V-WGP).
    #[serde(default)]
    pub transform: Option<String>,
    /// The transform preset describes `T^-1`, mapping latent values to targets.
    #[serde(default = "yes")]
    pub transform_inverted: bool,
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default)]
    pub predict_samples: Option<usize>,
    #[serde(default)]
    pub train_quadrature: Option<usize>,
    #[serde(default)]
    pub predict_quadrature: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV file, relative to the configuration file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    /// Target column name (or zero-based index without a header); the last column by default.
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default = "yes")]
    pub header: bool,
    #[serde(default)]
    pub folds: Option<FoldSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("out"), formats: vec![OutputFormat::Json, OutputFormat::Csv] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text).map_err(|e| match e {
            Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// The data named by the `data` section: a CSV file or a synthetic set.
    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.path, &self.data.synth) {
            (Some(p), None) => {
                let path = if p.is_absolute() { p.clone() } else { self.base_dir.join(p) };
                let target = self.data.target.as_deref().map_or(Column::Last, |t| Column::parse(t, self.data.header));
                load_csv(&path, &target, self.data.header)
            }
            (None, Some(s)) => {
                let d = generate(s)?;
                Ok(Dataset {
                    feature_names: (0..d.x.ncols()).map(|j| format!("x{j}")).collect(),
                    x: d.x,
                    y: d.y,
                    target_name: "y".into(),
                })
            }
            _ => Err(Error::Schema("data section needs exactly one of 'path' and 'synth'".into())),
        }
    }

    /// An uninitialized model for `x`; the initialization pipeline sets the
    /// inducing inputs and flow parameters.
    pub fn build_spec(&self, x: &Mat) -> Result<ModelSpec> {
        let m = &self.model;
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::Usage("need at least one row and one feature".into()));
        }
        if m.num_inducing == 0 {
            return Err(Error::Usage("need at least one inducing point".into()));
        }
        let kernel = m.kernel.clone().unwrap_or_else(|| KernelConfig::rbf(2.0, vec![2.0; d]));
        let z = x.rows(0, m.num_inducing.min(n)).into_owned();
        let mut spec = ModelSpec::new(m.kind, kernel, InducingState::new(z, m.whitened), m.likelihood);
        spec.mean = m.mean;
        if let Some(preset) = &m.flow {
            let chain = FlowChain::parse(preset)?;
            let mode = m.flow_mode.unwrap_or(FlowMode::Fixed);
            spec = spec.with_flow(chain.clone(), mode);
            if mode.is_input_dependent() {
                let cfg = NetConfig {
                    input_dim: d,
                    hidden: m.net.hidden.clone(),
                    activation: m.net.activation,
                    dropout: m.net.dropout,
                    output_dim: chain.num_params(),
                    weight_decay: m.net.weight_decay,
                };
                spec = spec.with_net(FlowNet::new(cfg, self.train.seed)?);
            }
        } else if m.flow_mode.is_some_and(|f| f != FlowMode::None) {
            return Err(Error::Usage("a flow mode needs a flow preset".into()));
        }
        if let Some(preset) = &m.transform {
            spec = spec.with_transform(FlowChain::parse(preset)?, m.transform_inverted);
        }
        if let Some(s) = m.train_samples {
            spec.train_samples = s;
        }
        if let Some(s) = m.predict_samples {
            spec.predict_samples = s;
        }
        if let Some(q) = m.train_quadrature {
            spec.train_quadrature = q;
        }
        if let Some(q) = m.predict_quadrature {
            spec.predict_quadrature = q;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "model": {"kind": "tgp", "flow": "sal", "flow_mode": "input-dependent-ba", "num_inducing": 5,
                  "net": {"hidden": [8], "dropout": 0.5}},
        "train": {"epochs": 3, "seed": 4},
        "data": {"synth": {"n": 30}}
    }"#;

    #[test]
    fn minimal_config_builds_a_model() {
        let cfg = RunConfig::from_json(SMALL).unwrap();
        let data = cfg.dataset().unwrap();
        assert_eq!(data.len(), 30);
        let spec = cfg.build_spec(&data.x).unwrap();
        assert_eq!(spec.inducing.num_inducing(), 5);
        let net = spec.net.unwrap();
        assert_eq!((net.config.hidden.clone(), net.config.dropout), (vec![8], 0.5));
        assert_eq!(net.config.output_dim, spec.flow.num_params());
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let bad = SMALL.replace("\"num_inducing\"", "\"num_inducers\"");
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Schema(_))));
        let bad = SMALL.replace("\"epochs\"", "\"epoch\"");
        assert!(matches!(RunConfig::from_json(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn data_needs_exactly_one_source() {
        let cfg = RunConfig::from_json(r#"{"model": {"kind": "svgp"}, "data": {}}"#).unwrap();
        assert!(matches!(cfg.dataset(), Err(Error::Schema(_))));
    }

    #[test]
    fn inducing_count_is_capped_by_the_data() {
        let cfg = RunConfig::from_json(r#"{"model": {"kind": "svgp", "num_inducing": 50}, "data": {"synth": {"n": 12}}}"#).unwrap();
        let spec = cfg.build_spec(&cfg.dataset().unwrap().x).unwrap();
        assert_eq!(spec.inducing.num_inducing(), 12);
    }
}
