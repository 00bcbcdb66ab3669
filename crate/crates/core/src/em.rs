//! Maximum-likelihood fitting by EM with eta as the latent variable.
//!
//! One sweep computes the posterior moments of eta at the current theta and
//! then updates alpha, sigma^2, beta and phi in that order. alpha, sigma^2 and
//! beta have closed-form maximizers of Q; phi takes one damped Newton step on
//! Q whose step size is halved until Q does not decrease, so every sweep
//! satisfies Q(theta_next; theta) >= Q(theta; theta) and the observed-data
//! log-likelihood is non-decreasing.
//!
//! With `Ktilde = Ktilde(phi)`, `V = E[eta eta' | Y]`, `Delta` the center
//! distance matrix, `P = Ktilde^{-1} (Delta o Ktilde)` and
//! `W = Ktilde^{-1} V`, the phi-dependent part of Q has derivative
//! `exp(-phi)/2 * g` with
//!
//! ```text
//! g = Tr((beta W - I) P)
//! H = -g + exp(-phi) [ Tr(Ktilde^{-1} (Delta o Delta o Ktilde) (beta W - I))
//!                      + Tr(P^2 (I - 2 beta W)) ]
//! phi_next = phi - a g / H
//! ```
//!
//! and second derivative `exp(-phi)/2 * H`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{FrkError, Result};
use crate::geometry::Measurement;
use crate::linalg::{self, trace_of_product};
use crate::model::{
    build_design_matrices, observation_vector, CorrelationFactor, FittedModel, ModelParams,
    SigmaFactor, SufficientStats,
};
use crate::trend::TrendSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Threshold on ||theta_l - theta_{l-1}||.
    pub tol: f64,
    /// Number of successive small steps required to stop.
    pub patience: usize,
    pub max_iter: usize,
    /// Maximum number of step-size halvings for the phi update.
    pub backtrack_max: usize,
    /// Initial range is tau divided by this ratio.
    pub phi_over_tau_init: f64,
    pub sigma2_floor: f64,
    pub inv_beta_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            patience: 100,
            max_iter: 5000,
            backtrack_max: 50,
            phi_over_tau_init: 5.0,
            sigma2_floor: 1e-6,
            inv_beta_floor: 1e-6,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tol > 0.0
            && self.patience > 0
            && self.max_iter > 0
            && self.phi_over_tau_init > 0.0
            && self.sigma2_floor > 0.0
            && self.inv_beta_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(FrkError::InvalidParameter(format!("invalid EM configuration {self:?}")))
        }
    }

    fn beta_cap(&self) -> f64 {
        1.0 / self.inv_beta_floor
    }
}

/// Posterior moments of eta given Y at some theta.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEta {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// E[eta eta' | Y] = cov + mean mean'.
    pub second_moment: DMatrix<f64>,
}

impl PosteriorEta {
    fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        let mut second_moment = &cov + &mean * mean.transpose();
        linalg::symmetrize(&mut second_moment);
        Self { mean, cov, second_moment }
    }
}

/// One row of the EM trace, describing the move from `params` to the next
/// iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRecord {
    pub iteration: usize,
    pub params: ModelParams,
    /// Observed-data log-likelihood at `params`.
    pub log_likelihood: f64,
    /// Q(theta_l; theta_l).
    pub q_current: f64,
    /// Q(theta_{l+1}; theta_l).
    pub q_next: f64,
    /// Accepted Newton step size for phi (0 when phi was frozen).
    pub phi_step: f64,
    pub delta_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
    pub converged: bool,
    pub final_params: ModelParams,
    pub final_log_likelihood: f64,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Log-likelihood at theta_0, theta_1, ..., theta_final.
    pub fn log_likelihoods(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.log_likelihood)
            .chain(std::iter::once(self.final_log_likelihood))
            .collect()
    }
}

/// OLS trend, range tau / ratio and the residual variance split evenly
/// between the noise and the basis coefficients.
pub fn init_params(stats: &SufficientStats, tau: f64, config: &EmConfig) -> Result<ModelParams> {
    if !(tau > 0.0) {
        return Err(FrkError::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    let v = stats.e0_sq / stats.n as f64;
    let half = 0.5 * v;
    Ok(ModelParams {
        alpha: stats.alpha_ref.as_slice().to_vec(),
        sigma2: half.max(config.sigma2_floor),
        beta: 1.0 / half.max(config.inv_beta_floor),
        phi: (tau / config.phi_over_tau_init).ln(),
    })
}

/// E-step from sufficient statistics; also returns the log-likelihood at
/// `params`, which falls out of the same factorization.
pub(crate) fn e_step_with_likelihood(
    stats: &SufficientStats,
    corr: &CorrelationFactor,
    params: &ModelParams,
) -> Result<(PosteriorEta, f64)> {
    let factor = SigmaFactor::new(&stats.s_s, corr, params, stats.n)?;
    let alpha = params.alpha_vec();
    let u = stats.s_residual(&alpha);
    // mean = (S'S + sigma^2 K^{-1})^{-1} S'(Y - T alpha), cov = sigma^2 (...)^{-1}
    let mean = &factor.a_inv * &u;
    let cov = &factor.a_inv * params.sigma2;
    let ll = factor.log_density(stats.residual_sq(&alpha), &u);
    Ok((PosteriorEta::new(mean, cov), ll))
}

pub(crate) fn posterior_from_stats(
    stats: &SufficientStats,
    corr: &CorrelationFactor,
    params: &ModelParams,
) -> Result<PosteriorEta> {
    Ok(e_step_with_likelihood(stats, corr, params)?.0)
}

/// Posterior mean and covariance of eta given the observations.
pub fn e_step(obs: &[Measurement], basis: &BasisSet, spec: &TrendSpec, params: &ModelParams) -> Result<PosteriorEta> {
    let dm = build_design_matrices(obs, basis, spec)?;
    let stats = SufficientStats::new(&observation_vector(obs), &dm)?;
    let corr = CorrelationFactor::new(&basis.distance_matrix(), params.phi)?;
    posterior_from_stats(&stats, &corr, params)
}

/// alpha_next = (T'T)^{-1} T'(Y - S mean).
pub fn update_alpha(stats: &SufficientStats, eta: &PosteriorEta) -> DVector<f64> {
    // T'(Y - S m) = T'Y - (S'T)'m, written relative to alpha_ref.
    let rhs = &stats.t_e0 - stats.s_t.tr_mul(&eta.mean);
    &stats.alpha_ref + stats.t_t_chol.solve(&rhs)
}

/// sigma^2_next = (||Y - T alpha - S mean||^2 + Tr(S'S cov)) / N, floored.
pub fn update_sigma2(stats: &SufficientStats, alpha: &DVector<f64>, eta: &PosteriorEta, floor: f64) -> f64 {
    let u = stats.s_residual(alpha);
    let m = &eta.mean;
    let fit_sq = stats.residual_sq(alpha) - 2.0 * m.dot(&u) + m.dot(&(&stats.s_s * m));
    let raw = (fit_sq.max(0.0) + trace_of_product(&stats.s_s, &eta.cov)) / stats.n as f64;
    raw.max(floor)
}

/// beta_next = r / Tr(Ktilde^{-1} V).
pub fn update_beta(eta: &PosteriorEta, k_tilde_inv: &DMatrix<f64>) -> Result<f64> {
    let tr = trace_of_product(k_tilde_inv, &eta.second_moment);
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(FrkError::Numerical(format!("Tr(Ktilde^-1 V) = {tr} is not positive")));
    }
    Ok(eta.second_moment.nrows() as f64 / tr)
}

/// Gradient factor g and Newton denominator H of the phi update at
/// `corr.phi` (see the module docs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiNewtonTerms {
    pub g: f64,
    pub h: f64,
}

impl PhiNewtonTerms {
    /// d/dphi of Q.
    pub fn gradient(&self, phi: f64) -> f64 {
        0.5 * (-phi).exp() * self.g
    }

    /// d^2/dphi^2 of Q.
    pub fn curvature(&self, phi: f64) -> f64 {
        0.5 * (-phi).exp() * self.h
    }
}

pub fn phi_newton_terms(
    corr: &CorrelationFactor,
    dist: &DMatrix<f64>,
    beta: f64,
    second_moment: &DMatrix<f64>,
) -> PhiNewtonTerms {
    let kinv = &corr.inverse;
    let w = kinv * second_moment;
    let b = dist.component_mul(&corr.k_tilde);
    let c = dist.component_mul(&b);
    let p = kinv * &b;
    let kc = kinv * &c;
    let pw = &p * &w;

    let tr_wp = trace_of_product(&w, &p);
    let g = beta * tr_wp - p.trace();
    let tr_kc_bw = beta * trace_of_product(&kc, &w) - kc.trace();
    let tr_p2 = trace_of_product(&p, &p);
    let tr_p2w = trace_of_product(&p, &pw);
    let h = -g + (-corr.phi).exp() * (tr_kc_bw + tr_p2 - 2.0 * beta * tr_p2w);
    PhiNewtonTerms { g, h }
}

/// Q restricted to its (beta, phi)-dependent terms:
/// `-1/2 ln det K - 1/2 Tr(K^{-1} V)`.
pub fn q_covariance_part(corr: &CorrelationFactor, beta: f64, second_moment: &DMatrix<f64>) -> f64 {
    -0.5 * corr.log_det_k(beta) - 0.5 * beta * trace_of_product(&corr.inverse, second_moment)
}

/// Q(theta; theta_tilde), given the posterior of eta at theta_tilde and the
/// correlation factor at theta's phi.
///
/// Equals the expected complete-data log-likelihood
/// `E[ln p(Y, eta; theta) | Y; theta_tilde]` plus `(N + r)/2 ln(2 pi)`.
pub fn q_function(
    theta: &ModelParams,
    eta: &PosteriorEta,
    stats: &SufficientStats,
    corr: &CorrelationFactor,
) -> f64 {
    let n = stats.n as f64;
    let alpha = theta.alpha_vec();
    let s2 = theta.sigma2;
    let u = stats.s_residual(&alpha);
    -0.5 * n * s2.ln() - 0.5 * stats.residual_sq(&alpha) / s2
        - 0.5 * trace_of_product(&stats.s_s, &eta.second_moment) / s2
        + u.dot(&eta.mean) / s2
        + q_covariance_part(corr, theta.beta, &eta.second_moment)
}

/// Result of a damped Newton update of phi.
#[derive(Debug, Clone)]
pub struct PhiUpdate {
    pub phi: f64,
    /// Accepted step size; 0 when the update was skipped.
    pub step: f64,
    /// Correlation factor at the returned phi.
    pub corr: CorrelationFactor,
    pub terms: PhiNewtonTerms,
}

/// One Newton step on phi with step halving until the covariance part of Q
/// is no smaller than at the current phi. A non-negative curvature means
/// Newton would head downhill; the step then follows the gradient with the
/// magnitude |g/H| and is still subject to the same acceptance test.
pub fn update_phi(
    corr: &CorrelationFactor,
    dist: &DMatrix<f64>,
    beta_next: f64,
    eta: &PosteriorEta,
    backtrack_max: usize,
) -> Result<PhiUpdate> {
    let terms = phi_newton_terms(corr, dist, beta_next, &eta.second_moment);
    let keep = |terms| PhiUpdate {
        phi: corr.phi,
        step: 0.0,
        corr: corr.clone(),
        terms,
    };
    if terms.h == 0.0 || !terms.h.is_finite() || !terms.g.is_finite() || terms.g == 0.0 {
        return Ok(keep(terms));
    }
    let newton = if terms.h < 0.0 {
        -terms.g / terms.h
    } else {
        terms.g / terms.h
    };
    let baseline = q_covariance_part(corr, beta_next, &eta.second_moment);
    let mut a = 1.0;
    for _ in 0..=backtrack_max {
        let candidate = corr.phi + a * newton;
        if candidate.is_finite() && candidate.abs() < 50.0 {
            if let Ok(next) = CorrelationFactor::new(dist, candidate) {
                let q = q_covariance_part(&next, beta_next, &eta.second_moment);
                if q >= baseline {
                    return Ok(PhiUpdate {
                        phi: candidate,
                        step: a,
                        corr: next,
                        terms,
                    });
                }
            }
        }
        a *= 0.5;
    }
    Ok(keep(terms))
}

fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Runs EM from an explicit starting point on precomputed statistics.
pub fn fit_em_from(
    stats: &SufficientStats,
    basis: &BasisSet,
    init: ModelParams,
    config: &EmConfig,
) -> Result<(ModelParams, EmTrace)> {
    config.validate()?;
    init.validate()?;
    if init.alpha.len() != stats.p() {
        return Err(FrkError::LengthMismatch { left: init.alpha.len(), right: stats.p() });
    }
    if stats.n <= stats.p() + 1 {
        return Err(FrkError::InvalidParameter(format!(
            "EM needs more than {} observations, got {}",
            stats.p() + 1,
            stats.n
        )));
    }
    let dist = basis.distance_matrix();
    let mut theta = init;
    let mut corr = CorrelationFactor::new(&dist, theta.phi)?;
    let mut records = Vec::new();
    let mut streak = 0usize;
    let mut converged = false;

    for iteration in 0..config.max_iter {
        let (eta, ll) = e_step_with_likelihood(stats, &corr, &theta)?;
        let q_current = q_function(&theta, &eta, stats, &corr);

        let alpha = update_alpha(stats, &eta);
        let sigma2 = update_sigma2(stats, &alpha, &eta, config.sigma2_floor);
        let beta = update_beta(&eta, &corr.inverse)?.min(config.beta_cap());
        let phi_update = update_phi(&corr, &dist, beta, &eta, config.backtrack_max)?;

        let next = ModelParams {
            alpha: alpha.as_slice().to_vec(),
            sigma2,
            beta,
            phi: phi_update.phi,
        };
        let q_next = q_function(&next, &eta, stats, &phi_update.corr);
        let delta_norm = euclidean_distance(&next.as_vector(), &theta.as_vector());
        records.push(EmRecord {
            iteration,
            params: theta,
            log_likelihood: ll,
            q_current,
            q_next,
            phi_step: phi_update.step,
            delta_norm,
        });
        theta = next;
        corr = phi_update.corr;

        if delta_norm < config.tol {
            streak += 1;
            if streak >= config.patience {
                converged = true;
                break;
            }
        } else {
            streak = 0;
        }
    }
    if !converged {
        log::warn!(
            "EM stopped at max_iter = {} without meeting the stopping rule",
            config.max_iter
        );
    }
    let final_log_likelihood = stats.log_likelihood(&corr, &theta)?;
    let trace = EmTrace {
        records,
        converged,
        final_params: theta.clone(),
        final_log_likelihood,
    };
    Ok((theta, trace))
}

/// Fits (alpha, sigma^2, beta, phi) by EM and conditions the fitted model on
/// the observations.
pub fn fit_em(
    obs: &[Measurement],
    basis: &BasisSet,
    spec: &TrendSpec,
    config: &EmConfig,
) -> Result<(FittedModel, EmTrace)> {
    let dm = build_design_matrices(obs, basis, spec)?;
    let stats = SufficientStats::new(&observation_vector(obs), &dm)?;
    let init = init_params(&stats, basis.tau, config)?;
    let (params, trace) = fit_em_from(&stats, basis, init, config)?;
    let model = FittedModel::from_stats(&stats, basis.clone(), spec.clone(), params)?;
    Ok((model, trace))
}
