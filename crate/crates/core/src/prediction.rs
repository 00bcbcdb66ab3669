//! Kriging of the denoised field Z from a fitted model.
//!
//! With `m = eta_mean` and `C = eta_cov` cached on the model, the predictor is
//! `t(x)'alpha + s(x)'m` and the posterior covariance of Z between two points
//! is `s(x)'C s(x')`. Both only touch the nonzero entries of s(x), so a point
//! costs O(nnz(s)^2) once the model is built.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisEvaluator;
use crate::error::{FrkError, Result};
use crate::geometry::{BoundingBox, Location};
use crate::model::FittedModel;
use crate::trend::trend_vector;

/// Negative variances smaller than this in magnitude are rounding noise.
pub const VARIANCE_CLIP: f64 = 1e-10;

/// Default upper bound on the number of grid points in one call.
pub const DEFAULT_GRID_CAP: usize = 25_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub z_hat: f64,
    /// Posterior variance of Z(x); excludes the measurement noise.
    pub var: f64,
}

impl Prediction {
    /// Variance of a new measurement Y(x) rather than of Z(x).
    pub fn with_noise(self, sigma2: f64) -> Self {
        Self { var: self.var + sigma2, ..self }
    }
}

fn sparse_quad(c: &nalgebra::DMatrix<f64>, a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut acc = 0.0;
    for &(i, si) in a {
        for &(j, sj) in b {
            acc += si * c[(i, j)] * sj;
        }
    }
    acc
}

fn mean_with(loc: &Location, model: &FittedModel, s: &[(usize, f64)]) -> f64 {
    let t = trend_vector(loc, &model.trend);
    let trend: f64 = t.iter().zip(&model.params.alpha).map(|(a, b)| a * b).sum();
    trend + s.iter().map(|&(j, v)| v * model.eta_mean[j]).sum::<f64>()
}

fn clip_variance(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v > -VARIANCE_CLIP {
        Ok(0.0)
    } else {
        Err(FrkError::Numerical(format!("negative posterior variance {v:e}")))
    }
}

pub fn predict_mean(loc: &Location, model: &FittedModel) -> f64 {
    let s = model.basis.evaluator().eval_sparse(loc);
    mean_with(loc, model, &s)
}

/// Posterior covariance of Z(a) and Z(b).
pub fn predict_covariance(a: &Location, b: &Location, model: &FittedModel) -> f64 {
    let ev = model.basis.evaluator();
    sparse_quad(&model.eta_cov, &ev.eval_sparse(a), &ev.eval_sparse(b))
}

pub fn predict_variance(loc: &Location, model: &FittedModel) -> Result<f64> {
    let s = model.basis.evaluator().eval_sparse(loc);
    clip_variance(sparse_quad(&model.eta_cov, &s, &s))
}

fn predict_with(ev: &BasisEvaluator<'_>, loc: &Location, model: &FittedModel) -> Result<Prediction> {
    let s = ev.eval_sparse(loc);
    Ok(Prediction {
        z_hat: mean_with(loc, model, &s),
        var: clip_variance(sparse_quad(&model.eta_cov, &s, &s))?,
    })
}

pub fn predict_point(loc: &Location, model: &FittedModel) -> Result<Prediction> {
    predict_with(&model.basis.evaluator(), loc, model)
}

/// Predictions at many locations, in input order.
pub fn predict_many(locs: &[Location], model: &FittedModel) -> Result<Vec<Prediction>> {
    let ev = model.basis.evaluator();
    locs.par_iter().map(|l| predict_with(&ev, l, model)).collect()
}

/// Regular grid with `x = min.x + i * resolution` for `i <= floor(width / resolution)`
/// and likewise for y; points are stored row-major (y outer, x inner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Location,
    pub resolution: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn covering(bbox: &BoundingBox, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(FrkError::InvalidParameter(format!("resolution must be > 0, got {resolution}")));
        }
        // A tiny tolerance keeps exact multiples (e.g. 4075 / 25) from losing a column.
        let count = |w: f64| (w / resolution + 1e-9).floor() as usize + 1;
        Ok(Self {
            origin: bbox.min,
            resolution,
            nx: count(bbox.width()),
            ny: count(bbox.height()),
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, k: usize) -> Location {
        let (iy, ix) = (k / self.nx, k % self.nx);
        Location::new(
            self.origin.x + ix as f64 * self.resolution,
            self.origin.y + iy as f64 * self.resolution,
        )
    }

    pub fn points(&self) -> Vec<Location> {
        (0..self.len()).map(|k| self.point(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGrid {
    pub spec: GridSpec,
    pub values: Vec<Prediction>,
}

pub fn predict_grid(bbox: &BoundingBox, resolution: f64, model: &FittedModel, cap: usize) -> Result<PredictionGrid> {
    let spec = GridSpec::covering(bbox, resolution)?;
    if spec.nx.checked_mul(spec.ny).is_none_or(|n| n > cap) {
        return Err(FrkError::GridTooLarge {
            requested: spec.nx.saturating_mul(spec.ny),
            cap,
        });
    }
    let values = predict_many(&spec.points(), model)?;
    Ok(PredictionGrid { spec, values })
}
