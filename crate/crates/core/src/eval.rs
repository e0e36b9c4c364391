//! Test-set metrics and k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::models::{predict, Likelihood, ModelSpec, PredictOptions};
use crate::training::{fit, init_pipeline, TrainConfig};

/// Metrics of one fitted model on one test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_test: usize,
    /// Mean negative log predictive density, original target scale.
    pub nll: f64,
    /// Standard error of `nll` over test points.
    pub nll_point_se: f64,
    /// Same as `nll` on the model's standardized scale.
    pub nll_standardized: f64,
    pub rmse: f64,
    /// Fraction of targets inside the central 95% interval (regression only).
    pub cov95: Option<f64>,
    /// Fraction of correctly classified points (classification only).
    pub accuracy: Option<f64>,
}

/// Outcome of one fold: metrics, or the error that stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FoldOutcome {
    Ok(FoldMetrics),
    Failed { fold: usize, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nll_mean: f64,
    pub nll_se: Option<f64>,
    pub rmse_mean: f64,
    pub rmse_se: Option<f64>,
    pub cov95_mean: Option<f64>,
    pub cov95_se: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_se: Option<f64>,
    pub folds: Vec<FoldOutcome>,
}

/// Mean and standard error; the error needs at least two values.
fn mean_se(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, None);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, Some((var / n).sqrt()))
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    (pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

/// Fraction of `y` inside `[lo, hi]`, bounds included.
pub fn coverage(lo: &[f64], hi: &[f64], y: &[f64]) -> f64 {
    let inside = y.iter().zip(lo.iter().zip(hi)).filter(|(t, (l, h))| *l <= *t && *t <= *h).count();
    inside as f64 / y.len() as f64
}

impl MetricsReport {
    /// Aggregates fold outcomes over the successful folds.
    pub fn from_folds(folds: Vec<FoldOutcome>) -> Result<Self> {
        let ok: Vec<&FoldMetrics> = folds
            .iter()
            .filter_map(|f| match f {
                FoldOutcome::Ok(m) => Some(m),
                FoldOutcome::Failed { .. } => None,
            })
            .collect();
        if ok.is_empty() {
            let why: Vec<String> = folds
                .iter()
                .map(|f| match f {
                    FoldOutcome::Failed { fold, error } => format!("fold {fold}: {error}"),
                    FoldOutcome::Ok(_) => String::new(),
                })
                .collect();
            return Err(Error::Convergence(format!("every fold failed ({})", why.join("; "))));
        }
        let col = |f: fn(&FoldMetrics) -> f64| ok.iter().map(|m| f(m)).collect::<Vec<_>>();
        let opt = |f: fn(&FoldMetrics) -> Option<f64>| -> (Option<f64>, Option<f64>) {
            let v: Option<Vec<f64>> = ok.iter().map(|m| f(m)).collect();
            match v {
                Some(v) => {
                    let (m, se) = mean_se(&v);
                    (Some(m), se)
                }
                None => (None, None),
            }
        };
        let (nll_mean, nll_se) = mean_se(&col(|m| m.nll));
        let (rmse_mean, rmse_se) = mean_se(&col(|m| m.rmse));
        let (cov95_mean, cov95_se) = opt(|m| m.cov95);
        let (acc_mean, acc_se) = opt(|m| m.accuracy);
        Ok(MetricsReport { nll_mean, nll_se, rmse_mean, rmse_se, cov95_mean, cov95_se, acc_mean, acc_se, folds })
    }
}

/// Predicts `x` and scores it against `y` (original scale).
pub fn evaluate(spec: &ModelSpec, x: &Mat, y: &[f64], opts: &PredictOptions) -> Result<FoldMetrics> {
    if y.is_empty() {
        return Err(Error::Usage("no test points".into()));
    }
    let opts = PredictOptions { levels: vec![0.025, 0.975], ..opts.clone() };
    let pred = predict(spec, x, Some(y), &opts)?;
    let ld = pred.log_density.expect("targets supplied");
    let nlls: Vec<f64> = ld.iter().map(|v| -v).collect();
    let (nll, point_se) = mean_se(&nlls);
    let classification = matches!(spec.likelihood, Likelihood::BernoulliProbit);
    let (cov95, accuracy) = if classification {
        let correct = pred.mean.iter().zip(y).filter(|(p, t)| (**p > 0.5) == (**t == 1.0)).count();
        (None, Some(correct as f64 / y.len() as f64))
    } else {
        let lo: Vec<f64> = pred.quantiles.iter().map(|q| q[0]).collect();
        let hi: Vec<f64> = pred.quantiles.iter().map(|q| q[1]).collect();
        (Some(coverage(&lo, &hi, y)), None)
    };
    Ok(FoldMetrics {
        fold: 0,
        n_test: y.len(),
        nll,
        nll_point_se: point_se.unwrap_or(0.0),
        nll_standardized: nll - spec.target.scale.ln(),
        rmse: rmse(&pred.mean, y),
        cov95,
        accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
}

/// Random `(train, test)` index splits. Every test split has `n / k` rows,
/// test splits are disjoint, and the `n mod k` leftover rows are always
/// trained on, so each training split has `n - n / k` rows.
pub fn folds(n: usize, spec: &FoldSpec) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if spec.k < 2 || spec.k > n {
        return Err(Error::Usage(format!("{} folds on {n} rows", spec.k)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let size = n / spec.k;
    Ok((0..spec.k)
        .map(|f| {
            let test: Vec<usize> = order[f * size..(f + 1) * size].to_vec();
            let train: Vec<usize> = order[..f * size].iter().chain(&order[(f + 1) * size..]).copied().collect();
            (train, test)
        })
        .collect())
}

/// Initializes, trains and evaluates `spec` on every fold concurrently.
/// Failed folds are reported in `folds` and left out of the averages.
pub fn crossval(
    spec: &ModelSpec,
    x: &Mat,
    y: &[f64],
    fold_spec: &FoldSpec,
    cfg: &TrainConfig,
    opts: &PredictOptions,
) -> Result<MetricsReport> {
    if x.nrows() != y.len() {
        return Err(Error::Usage(format!("{} inputs and {} targets", x.nrows(), y.len())));
    }
    let splits = folds(y.len(), fold_spec)?;
    let outcomes: Vec<FoldOutcome> = splits
        .par_iter()
        .enumerate()
        .map(|(f, (train, test))| {
            let run = || -> Result<FoldMetrics> {
                let xt = x.select_rows(train);
                let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let cfg = TrainConfig { seed: cfg.seed.wrapping_add(f as u64), ..cfg.clone() };
                let (init, _) = init_pipeline(spec, &xt, &yt, &cfg)?;
                let (fitted, _) = fit(&init, &xt, &yt, &cfg)?;
                let ys: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                let m = evaluate(&fitted, &x.select_rows(test), &ys, opts)?;
                Ok(FoldMetrics { fold: f, ..m })
            };
            match run() {
                Ok(m) => FoldOutcome::Ok(m),
                Err(e) => {
                    eprintln!("warning: fold {f} failed: {e}");
                    FoldOutcome::Failed { fold: f, error: e.to_string() }
                }
            }
        })
        .collect();
    MetricsReport::from_folds(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_have_zero_rmse() {
        let y = [0.5, -1.0, 2.0];
        assert_eq!(rmse(&y, &y), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]) - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn coverage_counts_closed_intervals() {
        assert_eq!(coverage(&[0.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 1.0], &[0.0, 1.0, 0.5, 1.5]), 0.75);
    }

    #[test]
    fn two_folds_on_ten_points_split_evenly() {
        let s = folds(10, &FoldSpec { k: 2, seed: 1 }).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|(tr, te)| tr.len() == 5 && te.len() == 5));
        assert!(s[0].1.iter().all(|i| !s[1].1.contains(i)));
    }

    #[test]
    fn ten_folds_train_on_ninety_percent_rounded_up() {
        for n in [10, 15, 37, 150, 1001] {
            let s = folds(n, &FoldSpec { k: 10, seed: 2 }).unwrap();
            let want = (0.9 * n as f64).ceil() as usize;
            assert!(s.iter().all(|(tr, te)| tr.len() == want && tr.len() + te.len() == n), "n={n}");
            let mut tests: Vec<usize> = s.iter().flat_map(|(_, te)| te.clone()).collect();
            tests.sort();
            tests.dedup();
            assert_eq!(tests.len(), 10 * (n / 10));
        }
    }

    #[test]
    fn report_aggregates_successes_only() {
        let m = |fold, nll| FoldOutcome::Ok(FoldMetrics {
            fold,
            n_test: 3,
            nll,
            nll_point_se: 0.1,
            nll_standardized: nll,
            rmse: 1.0,
            cov95: Some(0.9),
            accuracy: None,
        });
        let r = MetricsReport::from_folds(vec![m(0, 1.0), FoldOutcome::Failed { fold: 1, error: "x".into() }, m(2, 3.0)]).unwrap();
        assert_eq!(r.nll_mean, 2.0);
        assert_eq!(r.nll_se, Some(1.0));
        assert_eq!(r.acc_mean, None);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["nll_mean", "nll_se", "rmse_mean", "rmse_se", "cov95_mean", "cov95_se", "acc_mean", "acc_se", "folds"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(MetricsReport::from_folds(vec![FoldOutcome::Failed { fold: 0, error: "x".into() }]).is_err());
    }
}
