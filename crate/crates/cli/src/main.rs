use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tgp::autodiff::Mat;
use tgp::eval::{crossval, evaluate, FoldSpec, MetricsReport};
use tgp::io::{
    dump_qf0, dump_warping, load_model, read_table, save_model, table_csv, write_atomic, write_csv, write_qf0_csv,
    write_warping_csv, Column, Dataset, OutputFormat, RunConfig,
};
use tgp::models::{grad_check, predict, PredictOptions};
use tgp::synth::{generate, Generator, SynthSpec};
use tgp::training::{fit, init_pipeline};
use tgp::{Error, Result};

/// Smallest useful configuration, used by `grad-check` without `--config`.
const SMALL_CONFIG: &str = r#"{
    "model": {"kind": "tgp", "flow": "sal", "flow_mode": "input-dependent-ba", "num_inducing": 3,
              "net": {"hidden": [6]}},
    "train": {"init_epochs": 100},
    "data": {"synth": {"n": 8}}
}"#;

#[derive(Parser)]
#[command(name = "tgp", version, about = "Transformed and warped sparse Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize and train a model, then save it with its training trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predictive means, variances, 95% intervals and (with targets) log densities.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dropout draws for Bayesian flows.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        quadrature: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        csv: CsvArgs,
    },
    /// Test metrics of a saved model as JSON.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        csv: CsvArgs,
    },
    /// K-fold cross-validation of a configuration, reported as JSON.
    Crossval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        folds: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic dataset as CSV.
    Synth {
        /// Generator name, inline JSON, or a JSON file.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Input-dependent warping functions at selected rows.
    DumpWarping {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero-based rows; four evenly spaced rows by default.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<usize>>,
        #[arg(long, default_value_t = 50)]
        grid_size: usize,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        csv: CsvArgs,
    },
    /// Mean and covariance of q(f0) over selected rows.
    DumpQf0 {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Zero-based rows; all rows by default.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<usize>>,
        #[command(flatten)]
        csv: CsvArgs,
    },
    /// Finite-difference check of the bound's gradient on a small instance.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(clap::Args)]
struct CsvArgs {
    /// Target column (name, or index without a header); defaults to the last column.
    #[arg(long)]
    target: Option<String>,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

/// Inputs and optional targets for a model with `d` input columns: a file
/// with `d` columns has no targets, one with `d + 1` has them.
fn load_inputs(path: &Path, d: usize, args: &CsvArgs) -> Result<(Mat, Option<Vec<f64>>)> {
    let header = !args.no_header;
    let (_, rows) = read_table(path, header)?;
    if rows.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    match rows[0].len() {
        w if w == d && args.target.is_none() => Ok((Mat::from_fn(rows.len(), d, |i, j| rows[i][j]), None)),
        w if w == d + 1 => {
            let target = args.target.as_deref().map_or(Column::Last, |t| Column::parse(t, header));
            let data = tgp::io::load_csv(path, &target, header)?;
            Ok((data.x, Some(data.y)))
        }
        w => Err(Error::Schema(format!("{}: {w} columns for a model with {d} inputs", path.display()))),
    }
}

fn select(x: &Mat, rows: &[usize]) -> Result<Mat> {
    if let Some(r) = rows.iter().find(|&&r| r >= x.nrows()) {
        return Err(Error::Usage(format!("row {r} out of range for {} rows", x.nrows())));
    }
    Ok(x.select_rows(rows))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let dir = out.unwrap_or_else(|| cfg.base_dir.join(&cfg.output.dir));
    std::fs::create_dir_all(&dir)?;
    let data = cfg.dataset()?;
    let spec = cfg.build_spec(&data.x)?;
    let mut tc = cfg.train.clone();
    tc.progress = true;
    let (init, warnings) = init_pipeline(&spec, &data.x, &data.y, &tc)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("epoch,elbo,ell,kl,penalty,seconds");
    let (fitted, trace) = fit(&init, &data.x, &data.y, &tc)?;
    save_model(&fitted, &dir.join("model.json"))?;
    if cfg.output.formats.contains(&OutputFormat::Csv) {
        let header = ["epoch", "elbo", "ell", "kl", "penalty", "seconds", "jitter_escalations"].map(String::from);
        let rows = (0..trace.elbo.len()).map(|e| {
            vec![
                e as f64,
                trace.elbo[e],
                trace.ell[e],
                trace.kl[e],
                trace.penalty[e],
                trace.seconds[e],
                trace.jitter_escalations[e] as f64,
            ]
        });
        write_atomic(&dir.join("trace.csv"), &table_csv(&header, rows)?)?;
    }
    let summary = serde_json::json!({
        "model": dir.join("model.json"),
        "epochs": trace.elbo.len(),
        "steps": trace.steps,
        "final_elbo": trace.elbo.last(),
        "seconds": trace.seconds.last(),
        "jitter": fitted.jitter,
        "warnings": warnings,
    });
    let text = to_json(&summary)?;
    if cfg.output.formats.contains(&OutputFormat::Json) {
        write_atomic(&dir.join("summary.json"), text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn predict_cmd(model: &Path, data: &Path, out: &Path, samples: Option<usize>, quadrature: Option<usize>, seed: u64, csv: &CsvArgs) -> Result<()> {
    let spec = load_model(model)?;
    let (x, y) = load_inputs(data, spec.input_dim(), csv)?;
    let opts = PredictOptions { samples, quadrature, seed, ..Default::default() };
    let p = predict(&spec, &x, y.as_deref(), &opts)?;
    let mut header: Vec<String> = vec!["mean".into(), "variance".into()];
    header.extend(p.levels.iter().map(|l| format!("q{l}")));
    if p.log_density.is_some() {
        header.push("log_density".into());
    }
    let rows = (0..p.mean.len()).map(|i| {
        let mut r = vec![p.mean[i], p.variance[i]];
        r.extend(&p.quantiles[i]);
        if let Some(ld) = &p.log_density {
            r.push(ld[i]);
        }
        r
    });
    write_atomic(out, &table_csv(&header, rows)?)
}

fn evaluate_cmd(model: &Path, data: &Path, seed: u64, csv: &CsvArgs) -> Result<()> {
    let spec = load_model(model)?;
    let (x, y) = load_inputs(data, spec.input_dim(), csv)?;
    let y = y.ok_or_else(|| Error::Schema(format!("{}: evaluation needs a target column", data.display())))?;
    let m = evaluate(&spec, &x, &y, &PredictOptions { seed, ..Default::default() })?;
    let report = MetricsReport::from_folds(vec![tgp::eval::FoldOutcome::Ok(m)])?;
    println!("{}", to_json(&report)?);
    Ok(())
}

fn crossval_cmd(config: &Path, k: usize, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data = cfg.dataset()?;
    let spec = cfg.build_spec(&data.x)?;
    let folds = FoldSpec { k, seed: cfg.data.folds.map_or(cfg.train.seed, |f| f.seed) };
    let report = crossval(&spec, &data.x, &data.y, &folds, &cfg.train, &PredictOptions::default())?;
    let text = to_json(&report)?;
    if cfg.output.formats.contains(&OutputFormat::Json) {
        let dir = cfg.base_dir.join(&cfg.output.dir);
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("crossval.json"), text.as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

fn synth_spec(arg: &str) -> Result<SynthSpec> {
    let parse = |text: &str| serde_json::from_str::<SynthSpec>(text).map_err(|e| Error::Schema(format!("synth spec: {e}")));
    if arg.trim_start().starts_with('{') {
        return parse(arg);
    }
    if let Ok(g) = Generator::by_name(arg) {
        return Ok(SynthSpec { generator: g, ..Default::default() });
    }
    let path = Path::new(arg);
    if path.exists() {
        return parse(&std::fs::read_to_string(path)?);
    }
    Generator::by_name(arg).map(|generator| SynthSpec { generator, ..Default::default() })
}

fn synth(spec: &str, out: &Path, n: Option<usize>, seed: Option<u64>, noise: Option<f64>) -> Result<()> {
    let mut s = synth_spec(spec)?;
    s.n = n.unwrap_or(s.n);
    s.seed = seed.unwrap_or(s.seed);
    s.noise_std = noise.unwrap_or(s.noise_std);
    let d = generate(&s)?;
    let data = Dataset {
        feature_names: (0..d.x.ncols()).map(|j| format!("x{j}")).collect(),
        x: d.x,
        y: d.y,
        target_name: "y".into(),
    };
    write_csv(out, &data)
}

fn default_rows(n: usize) -> Vec<usize> {
    let k = n.min(4);
    (0..k).map(|i| if k == 1 { 0 } else { i * (n - 1) / (k - 1) }).collect()
}

#[allow(clippy::too_many_arguments)]
fn dump_warping_cmd(model: &Path, data: &Path, out: &Path, rows: Option<Vec<usize>>, grid_size: usize, samples: usize, seed: u64, csv: &CsvArgs) -> Result<()> {
    let spec = load_model(model)?;
    let (x, y) = load_inputs(data, spec.input_dim(), csv)?;
    if grid_size < 2 {
        return Err(Error::Usage("grid needs at least two points".into()));
    }
    // the grid spans the training targets on the model's scale
    let (lo, hi) = match &y {
        Some(y) => {
            let ys = spec.target.apply(y);
            (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        None => (-3.0, 3.0),
    };
    let grid: Vec<f64> = (0..grid_size).map(|i| lo + (hi - lo) * i as f64 / (grid_size - 1) as f64).collect();
    let rows = rows.unwrap_or_else(|| default_rows(x.nrows()));
    let table = dump_warping(&spec, &select(&x, &rows)?, &grid, samples, seed)?;
    write_warping_csv(out, &table)
}

fn dump_qf0_cmd(model: &Path, data: &Path, out: &Path, rows: Option<Vec<usize>>, csv: &CsvArgs) -> Result<()> {
    let spec = load_model(model)?;
    let (x, _) = load_inputs(data, spec.input_dim(), csv)?;
    let x = match rows {
        Some(r) => select(&x, &r)?,
        None => x,
    };
    let (mean, cov) = dump_qf0(&spec, &x)?;
    write_qf0_csv(out, &mean, &cov)
}

/// Returns the worst relative error.
fn grad_check_cmd(config: Option<&Path>, seed: Option<u64>) -> Result<f64> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json(SMALL_CONFIG)?,
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.model.num_inducing = cfg.model.num_inducing.min(3);
    cfg.train.init_epochs = cfg.train.init_epochs.min(100);
    cfg.train.kmeans_runs = 1;
    let data = cfg.dataset()?;
    let small = data.subset(&(0..8.min(data.len())).map(|i| i * data.len() / 8.min(data.len())).collect::<Vec<_>>());
    let spec = cfg.build_spec(&small.x)?;
    let (mut spec, _) = init_pipeline(&spec, &small.x, &small.y, &cfg.train)?;
    // move q(u) away from its initial values so every gradient is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let m = spec.inducing.num_inducing();
    spec.inducing.m = Mat::from_fn(m, 1, |_, _| rng.random_range(-0.5..0.5));
    spec.inducing.s_factor = Mat::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => rng.random_range(-0.1..0.1),
        std::cmp::Ordering::Equal => rng.random_range(0.2..0.5),
        std::cmp::Ordering::Less => 0.0,
    });
    let ys = spec.target.apply(&small.y);
    grad_check(&spec, &small.x, &ys, small.len(), cfg.train.seed)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, out)?,
        Command::Predict { model, data, out, samples, quadrature, seed, csv } => {
            predict_cmd(&model, &data, &out, samples, quadrature, seed, &csv)?
        }
        Command::Evaluate { model, data, seed, csv } => evaluate_cmd(&model, &data, seed, &csv)?,
        Command::Crossval { config, folds, seed } => crossval_cmd(&config, folds, seed)?,
        Command::Synth { spec, out, n, seed, noise } => synth(&spec, &out, n, seed, noise)?,
        Command::DumpWarping { model, data, out, rows, grid_size, samples, seed, csv } => {
            dump_warping_cmd(&model, &data, &out, rows, grid_size, samples, seed, &csv)?
        }
        Command::DumpQf0 { model, data, out, rows, csv } => dump_qf0_cmd(&model, &data, &out, rows, &csv)?,
        Command::GradCheck { config, seed } => {
            let err = grad_check_cmd(config.as_deref(), seed)?;
            println!("{err:e}");
            if !(err < 1e-4) {
                eprintln!("error: gradient check failed (max relative error {err:e})");
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("TGP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.root().is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
