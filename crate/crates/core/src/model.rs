//! The low-rank spatial model: design matrices, the exponential correlation
//! family for the basis coefficients, and every Sigma-related quantity
//! evaluated through r x r systems only.
//!
//! ```text
//! Y = T alpha + S eta + sigma * eps,   eta ~ N(0, K),   K = Ktilde(phi) / beta
//! Sigma = sigma^2 I_N + S K S'
//! Sigma^{-1} = sigma^{-2} I - sigma^{-2} S (sigma^2 K^{-1} + S'S)^{-1} S'
//! ln det Sigma = (N - r) ln sigma^2 + ln det(sigma^2 K^{-1} + S'S) + ln det K
//! ```

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisMatrix, BasisSet};
use crate::error::{FrkError, Result};
use crate::geometry::{Location, Measurement};
use crate::linalg::{self, guard_not_obs_square};
use crate::trend::{trend_vector, TrendSpec};

/// Condition number of T'T above which the trend is considered unidentifiable.
pub const MAX_DESIGN_CONDITION: f64 = 1e12;

/// theta = (alpha, sigma^2, beta, phi).
///
/// `alpha` is `(p_t, kappa)` or `(p_t, kappa, varsigma)`; `1/beta` is the
/// variance of each basis coefficient and `exp(phi)` the correlation range in
/// meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha: Vec<f64>,
    pub sigma2: f64,
    pub beta: f64,
    pub phi: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(FrkError::InvalidParameter(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(FrkError::InvalidParameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if !self.phi.is_finite() || self.alpha.iter().any(|a| !a.is_finite()) {
            return Err(FrkError::InvalidParameter("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn alpha_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.alpha)
    }

    /// Flattened (alpha, sigma2, beta, phi), the vector the stopping rule
    /// measures distances on.
    pub fn as_vector(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend([self.sigma2, self.beta, self.phi]);
        v
    }

    pub fn range(&self) -> f64 {
        self.phi.exp()
    }
}

#[derive(Debug, Clone)]
pub struct DesignMatrices {
    /// N x p trend matrix, row i = t(x_i)'.
    pub t: DMatrix<f64>,
    /// N x r basis matrix, row i = s(x_i)'.
    pub s: BasisMatrix,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.t.nrows()
    }

    pub fn p(&self) -> usize {
        self.t.ncols()
    }

    pub fn r(&self) -> usize {
        self.s.ncols()
    }
}

pub fn trend_matrix(locs: &[Location], spec: &TrendSpec) -> DMatrix<f64> {
    let p = spec.p();
    let mut t = DMatrix::zeros(locs.len(), p);
    for (i, loc) in locs.iter().enumerate() {
        t.row_mut(i).copy_from(&trend_vector(loc, spec).transpose());
    }
    t
}

pub fn build_design_matrices(
    obs: &[Measurement],
    basis: &BasisSet,
    spec: &TrendSpec,
) -> Result<DesignMatrices> {
    spec.validate()?;
    let p = spec.p();
    if obs.len() < p + 1 {
        return Err(FrkError::InvalidParameter(format!(
            "need at least {} observations for a {p}-term trend, got {}",
            p + 1,
            obs.len()
        )));
    }
    let locs: Vec<Location> = obs.iter().map(|m| m.loc).collect();
    let t = trend_matrix(&locs, spec);
    check_design(&t)?;
    let s = basis.evaluator().matrix(&locs);
    Ok(DesignMatrices { t, s })
}

fn check_design(t: &DMatrix<f64>) -> Result<()> {
    let condition = linalg::condition_number(&t.tr_mul(t));
    if !(condition <= MAX_DESIGN_CONDITION) {
        return Err(FrkError::DegenerateDesign { condition });
    }
    Ok(())
}

/// Ktilde(phi)_ij = exp(-|x'_i - x'_j| / exp(phi)) from a center-distance matrix.
pub fn correlation_from_distances(dist: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let rate = (-phi).exp();
    dist.map(|d| (-d * rate).exp())
}

/// K(beta, phi) = Ktilde(phi) / beta.
#[allow(non_snake_case)]
pub fn covariance_K(basis: &BasisSet, beta: f64, phi: f64) -> Result<DMatrix<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(FrkError::InvalidParameter(format!("beta must be > 0, got {beta}")));
    }
    if !phi.is_finite() {
        return Err(FrkError::InvalidParameter(format!("phi must be finite, got {phi}")));
    }
    // Re-validates center distinctness; a duplicated center makes K singular.
    BasisSet::new(basis.centers.clone(), basis.tau)?;
    Ok(correlation_from_distances(&basis.distance_matrix(), phi) / beta)
}

/// Cholesky-factored Ktilde(phi) with its inverse and log-determinant.
#[derive(Debug, Clone)]
pub struct CorrelationFactor {
    pub phi: f64,
    pub k_tilde: DMatrix<f64>,
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

impl CorrelationFactor {
    pub fn new(dist: &DMatrix<f64>, phi: f64) -> Result<Self> {
        let k_tilde = correlation_from_distances(dist, phi);
        let inv = linalg::spd_invert(&k_tilde, "Ktilde").map_err(|_| {
            FrkError::SingularCovariance(format!("Ktilde(phi = {phi:.4}) is not positive definite"))
        })?;
        Ok(Self {
            phi,
            inverse: inv.inverse,
            log_det: inv.log_det,
            k_tilde,
        })
    }

    pub fn r(&self) -> usize {
        self.k_tilde.nrows()
    }

    /// K^{-1} = beta Ktilde^{-1}.
    pub fn k_inverse(&self, beta: f64) -> DMatrix<f64> {
        &self.inverse * beta
    }

    /// ln det K = ln det Ktilde - r ln beta.
    pub fn log_det_k(&self, beta: f64) -> f64 {
        self.log_det - self.r() as f64 * beta.ln()
    }
}

/// Factorization of Sigma through the r x r matrix A = sigma^2 K^{-1} + S'S.
#[derive(Debug, Clone)]
pub struct SigmaFactor {
    pub sigma2: f64,
    pub n: usize,
    /// (sigma^2 K^{-1} + S'S)^{-1}.
    pub a_inv: DMatrix<f64>,
    pub log_det_a: f64,
    pub log_det_k: f64,
}

impl SigmaFactor {
    pub fn new(gram: &DMatrix<f64>, corr: &CorrelationFactor, params: &ModelParams, n: usize) -> Result<Self> {
        params.validate()?;
        let mut a = corr.k_inverse(params.beta) * params.sigma2 + gram;
        linalg::symmetrize(&mut a);
        let a_inv = linalg::spd_invert(&a, "sigma^2 K^{-1} + S'S")?;
        Ok(Self {
            sigma2: params.sigma2,
            n,
            a_inv: a_inv.inverse,
            log_det_a: a_inv.log_det,
            log_det_k: corr.log_det_k(params.beta),
        })
    }

    pub fn r(&self) -> usize {
        self.a_inv.nrows()
    }

    pub fn log_det_sigma(&self) -> f64 {
        (self.n as f64 - self.r() as f64) * self.sigma2.ln() + self.log_det_a + self.log_det_k
    }

    /// Sigma^{-1} v.
    pub fn apply_inverse(&self, s: &BasisMatrix, v: &DVector<f64>) -> DVector<f64> {
        let inner = &self.a_inv * s.tr_mul_vec(v);
        (v - s.mul_vec(&inner)) / self.sigma2
    }

    /// e' Sigma^{-1} e from ||e||^2 and u = S'e.
    pub fn quad_form(&self, e_sq: f64, u: &DVector<f64>) -> f64 {
        let w = &self.a_inv * u;
        (e_sq - u.dot(&w)) / self.sigma2
    }

    /// Full Gaussian log-density including the -(N/2) ln 2 pi constant.
    pub fn log_density(&self, e_sq: f64, u: &DVector<f64>) -> f64 {
        -0.5 * self.log_det_sigma() - 0.5 * self.quad_form(e_sq, u) - 0.5 * self.n as f64 * (2.0 * PI).ln()
    }
}

fn factor_for(dm: &DesignMatrices, basis: &BasisSet, params: &ModelParams) -> Result<SigmaFactor> {
    guard_not_obs_square(dm.r(), dm.r(), dm.n());
    let corr = CorrelationFactor::new(&basis.distance_matrix(), params.phi)?;
    SigmaFactor::new(&dm.s.gram(), &corr, params, dm.n())
}

/// Sigma^{-1} v through the Woodbury identity; O(r^2 N + r^3), no N x N matrix.
pub fn apply_sigma_inverse(
    v: &DVector<f64>,
    dm: &DesignMatrices,
    basis: &BasisSet,
    params: &ModelParams,
) -> Result<DVector<f64>> {
    if v.len() != dm.n() {
        return Err(FrkError::LengthMismatch { left: v.len(), right: dm.n() });
    }
    Ok(factor_for(dm, basis, params)?.apply_inverse(&dm.s, v))
}

/// Gaussian log-likelihood of the observations, including the additive
/// constant -(N/2) ln(2 pi), so values are comparable across sigma^2.
pub fn log_likelihood(
    y: &DVector<f64>,
    dm: &DesignMatrices,
    basis: &BasisSet,
    params: &ModelParams,
) -> Result<f64> {
    if y.len() != dm.n() {
        return Err(FrkError::LengthMismatch { left: y.len(), right: dm.n() });
    }
    if params.alpha.len() != dm.p() {
        return Err(FrkError::LengthMismatch { left: params.alpha.len(), right: dm.p() });
    }
    let factor = factor_for(dm, basis, params)?;
    let e = y - &dm.t * params.alpha_vec();
    Ok(factor.log_density(e.norm_squared(), &dm.s.tr_mul_vec(&e)))
}

pub fn observation_vector(obs: &[Measurement]) -> DVector<f64> {
    DVector::from_iterator(obs.len(), obs.iter().map(|m| m.value))
}

/// Data summaries that make every EM iteration independent of N.
///
/// Residuals are taken relative to a reference trend `alpha_ref` (the OLS fit)
/// so that squared norms stay small and cancellation-free.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub n: usize,
    pub alpha_ref: DVector<f64>,
    /// ||e0||^2 with e0 = Y - T alpha_ref.
    pub e0_sq: f64,
    /// T'e0.
    pub t_e0: DVector<f64>,
    /// S'e0.
    pub s_e0: DVector<f64>,
    pub t_t: DMatrix<f64>,
    /// S'T (r x p).
    pub s_t: DMatrix<f64>,
    /// S'S (r x r).
    pub s_s: DMatrix<f64>,
    pub t_t_chol: Cholesky<f64, Dyn>,
}

impl SufficientStats {
    pub fn new(y: &DVector<f64>, dm: &DesignMatrices) -> Result<Self> {
        if y.len() != dm.n() {
            return Err(FrkError::LengthMismatch { left: y.len(), right: dm.n() });
        }
        let t_t = dm.t.tr_mul(&dm.t);
        check_design(&dm.t)?;
        let t_t_chol = linalg::cholesky(&t_t, "T'T")?;
        let alpha_ref = t_t_chol.solve(&dm.t.tr_mul(y));
        let e0 = y - &dm.t * &alpha_ref;
        Ok(Self {
            n: dm.n(),
            e0_sq: e0.norm_squared(),
            t_e0: dm.t.tr_mul(&e0),
            s_e0: dm.s.tr_mul_vec(&e0),
            s_t: dm.s.tr_mul_dense(&dm.t),
            s_s: dm.s.gram(),
            t_t,
            t_t_chol,
            alpha_ref,
        })
    }

    pub fn r(&self) -> usize {
        self.s_s.nrows()
    }

    pub fn p(&self) -> usize {
        self.t_t.nrows()
    }

    /// ||Y - T alpha||^2.
    pub fn residual_sq(&self, alpha: &DVector<f64>) -> f64 {
        let d = alpha - &self.alpha_ref;
        (self.e0_sq - 2.0 * d.dot(&self.t_e0) + d.dot(&(&self.t_t * &d))).max(0.0)
    }

    /// S'(Y - T alpha).
    pub fn s_residual(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let d = alpha - &self.alpha_ref;
        &self.s_e0 - &self.s_t * d
    }

    /// T'(Y - T alpha).
    pub fn t_residual(&self, alpha: &DVector<f64>) -> DVector<f64> {
        let d = alpha - &self.alpha_ref;
        &self.t_e0 - &self.t_t * d
    }

    /// Log-likelihood (with the 2 pi constant) from the summaries alone.
    pub fn log_likelihood(&self, corr: &CorrelationFactor, params: &ModelParams) -> Result<f64> {
        let alpha = params.alpha_vec();
        let factor = SigmaFactor::new(&self.s_s, corr, params, self.n)?;
        Ok(factor.log_density(self.residual_sq(&alpha), &self.s_residual(&alpha)))
    }
}

/// A model ready for prediction: parameters plus the posterior moments of
/// eta given the training data.
///
/// `eta_mean` equals K S' Sigma^{-1} (Y - T alpha), and `eta_cov` equals
/// K - K S' Sigma^{-1} S K, so the kriging mean and covariance at new points
/// only need s(x) and these r-sized caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub basis: BasisSet,
    pub trend: TrendSpec,
    pub params: ModelParams,
    pub eta_mean: DVector<f64>,
    pub eta_cov: DMatrix<f64>,
    pub n_obs: usize,
}

impl FittedModel {
    /// Conditions the model on the training observations.
    pub fn condition(
        obs: &[Measurement],
        basis: BasisSet,
        trend: TrendSpec,
        params: ModelParams,
    ) -> Result<Self> {
        let dm = build_design_matrices(obs, &basis, &trend)?;
        let stats = SufficientStats::new(&observation_vector(obs), &dm)?;
        Self::from_stats(&stats, basis, trend, params)
    }

    pub fn from_stats(
        stats: &SufficientStats,
        basis: BasisSet,
        trend: TrendSpec,
        params: ModelParams,
    ) -> Result<Self> {
        let corr = CorrelationFactor::new(&basis.distance_matrix(), params.phi)?;
        let post = crate::em::posterior_from_stats(stats, &corr, &params)?;
        Ok(Self {
            basis,
            trend,
            params,
            eta_mean: post.mean,
            eta_cov: post.cov,
            n_obs: stats.n,
        })
    }

    /// The model with no data: eta keeps its prior N(0, K).
    pub fn prior(basis: BasisSet, trend: TrendSpec, params: ModelParams) -> Result<Self> {
        params.validate()?;
        let k = covariance_K(&basis, params.beta, params.phi)?;
        Ok(Self {
            eta_mean: DVector::zeros(basis.len()),
            eta_cov: k,
            basis,
            trend,
            params,
            n_obs: 0,
        })
    }

    pub fn r(&self) -> usize {
        self.basis.len()
    }
}
