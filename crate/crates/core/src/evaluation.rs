//! Cross-validation of the kriging fit against the log-normal baseline.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::build_basis_set;
use crate::em::{fit_em, EmConfig};
use crate::error::{FrkError, Result};
use crate::geometry::{BoundingBox, Location, Measurement};
use crate::model::ModelParams;
use crate::prediction::predict_mean;
use crate::trend::TrendSpec;

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(FrkError::LengthMismatch { left: pred.len(), right: truth.len() });
    }
    if pred.is_empty() {
        return Err(FrkError::InvalidParameter("rmse of empty vectors".into()));
    }
    let ss: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles 0..n with the seed and deals indices into k folds round-robin.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(FrkError::InvalidParameter(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(FrkError::InvalidParameter(format!("cannot split {n} points into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &p) in perm.iter().enumerate() {
        tests[i % k].push(p);
    }
    Ok((0..k)
        .map(|f| {
            let mut test = tests[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = (0..k).filter(|&g| g != f).flat_map(|g| tests[g].iter().copied()).collect();
            train.sort_unstable();
            Fold { train, test }
        })
        .collect())
}

/// Random split into `n_train` training indices and the rest.
pub fn train_test_split(n: usize, n_train: usize, seed: u64) -> Result<Fold> {
    if n_train > n {
        return Err(FrkError::InvalidParameter(format!("n_train = {n_train} exceeds n = {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Fold { train, test })
}

pub fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Least-squares fit of `Y = p_t - 10 kappa log10 dist + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogNormalFit {
    pub p_t: f64,
    pub kappa: f64,
    /// Mean squared residual.
    pub sigma2: f64,
    pub trend: TrendSpec,
}

impl LogNormalFit {
    pub fn predict(&self, loc: &Location) -> f64 {
        self.p_t + self.kappa * self.trend.log_distance_term(loc)
    }
}

pub fn fit_lognormal_baseline(train: &[Measurement], trend: &TrendSpec) -> Result<LogNormalFit> {
    if train.len() < 3 {
        return Err(FrkError::InvalidParameter(format!("baseline needs >= 3 points, got {}", train.len())));
    }
    trend.validate()?;
    let n = train.len() as f64;
    let xs: Vec<f64> = train.iter().map(|m| trend.log_distance_term(&m.loc)).collect();
    let x_bar = xs.iter().sum::<f64>() / n;
    let y_bar = train.iter().map(|m| m.value).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, m) in xs.iter().zip(train) {
        sxx += (x - x_bar) * (x - x_bar);
        sxy += (x - x_bar) * (m.value - y_bar);
    }
    let spread = xs.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= 1e-12 * n * spread * spread {
        return Err(FrkError::DegenerateDesign { condition: f64::INFINITY });
    }
    let kappa = sxy / sxx;
    let p_t = y_bar - kappa * x_bar;
    let sigma2 = xs
        .iter()
        .zip(train)
        .map(|(x, m)| (m.value - p_t - kappa * x).powi(2))
        .sum::<f64>()
        / n;
    Ok(LogNormalFit { p_t, kappa, sigma2, trend: trend.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CvMethod {
    Lognormal,
    Frk { tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub method: CvMethod,
    pub k: usize,
    pub seed: u64,
    pub trend: TrendSpec,
    pub em: EmConfig,
    /// Area carrying the candidate basis grid; defaults to the bounding box of
    /// all observations so every fold shares the same grid.
    pub area: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FoldParams {
    Lognormal { p_t: f64, kappa: f64, sigma2: f64 },
    Frk { params: ModelParams, r: usize, iterations: usize, converged: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rmse: Option<f64>,
    pub params: Option<FoldParams>,
    pub error: Option<String>,
    /// Wall-clock time of the fit; not serialized so reports stay
    /// reproducible byte for byte.
    #[serde(skip)]
    pub fit_time: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: CvMethod,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    /// Mean RMSE over the folds that succeeded.
    pub mean_rmse: f64,
    /// Sample standard deviation (n - 1 denominator) over the same folds.
    pub std_rmse: f64,
    pub failed_folds: usize,
    #[serde(skip)]
    pub total_time: Duration,
}

impl CvReport {
    pub fn fold_rmses(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|f| f.rmse).collect()
    }

    pub fn mean_fit_time(&self) -> Duration {
        let ok: Vec<Duration> = self.folds.iter().filter(|f| f.rmse.is_some()).map(|f| f.fit_time).collect();
        if ok.is_empty() {
            Duration::ZERO
        } else {
            ok.iter().sum::<Duration>() / ok.len() as u32
        }
    }
}

pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn run_fold(fold: usize, split: &Fold, obs: &[Measurement], area: &BoundingBox, cfg: &CvConfig) -> FoldResult {
    let train = select(obs, &split.train);
    let test = select(obs, &split.test);
    let truth: Vec<f64> = test.iter().map(|m| m.value).collect();
    let start = Instant::now();
    let outcome = (|| -> Result<(Vec<f64>, FoldParams)> {
        match cfg.method {
            CvMethod::Lognormal => {
                let fit = fit_lognormal_baseline(&train, &cfg.trend)?;
                let pred = test.iter().map(|m| fit.predict(&m.loc)).collect();
                Ok((pred, FoldParams::Lognormal { p_t: fit.p_t, kappa: fit.kappa, sigma2: fit.sigma2 }))
            }
            CvMethod::Frk { tau } => {
                let locs: Vec<Location> = train.iter().map(|m| m.loc).collect();
                let basis = build_basis_set(area, tau, &locs)?;
                let r = basis.len();
                let (model, trace) = fit_em(&train, &basis, &cfg.trend, &cfg.em)?;
                let pred = test.iter().map(|m| predict_mean(&m.loc, &model)).collect();
                Ok((
                    pred,
                    FoldParams::Frk {
                        params: model.params,
                        r,
                        iterations: trace.iterations(),
                        converged: trace.converged,
                    },
                ))
            }
        }
    })();
    let fit_time = start.elapsed();
    match outcome.and_then(|(pred, params)| Ok((rmse(&pred, &truth)?, params))) {
        Ok((e, params)) => FoldResult {
            fold,
            n_train: train.len(),
            n_test: test.len(),
            rmse: Some(e),
            params: Some(params),
            error: None,
            fit_time,
        },
        Err(err) => {
            log::warn!("fold {fold} failed: {err}");
            FoldResult {
                fold,
                n_train: train.len(),
                n_test: test.len(),
                rmse: None,
                params: None,
                error: Some(err.to_string()),
                fit_time,
            }
        }
    }
}

/// k-fold cross-validation; folds run in parallel and are reported in fold
/// order. Failed folds are listed but excluded from the summary.
pub fn cross_validate(obs: &[Measurement], cfg: &CvConfig) -> Result<CvReport> {
    let start = Instant::now();
    let splits = kfold_split(obs.len(), cfg.k, cfg.seed)?;
    let area = match cfg.area {
        Some(a) => a,
        None => BoundingBox::of_measurements(obs).ok_or_else(|| FrkError::InvalidParameter("no observations".into()))?,
    };
    let folds: Vec<FoldResult> = splits
        .par_iter()
        .enumerate()
        .map(|(f, split)| run_fold(f, split, obs, &area, cfg))
        .collect();
    let rmses: Vec<f64> = folds.iter().filter_map(|f| f.rmse).collect();
    let (mean_rmse, std_rmse) = mean_and_std(&rmses);
    Ok(CvReport {
        method: cfg.method,
        k: cfg.k,
        seed: cfg.seed,
        failed_folds: folds.len() - rmses.len(),
        folds,
        mean_rmse,
        std_rmse,
        total_time: start.elapsed(),
    })
}
