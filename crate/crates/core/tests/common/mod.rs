//! Dense reference computations shared by the integration tests. Everything
//! here is built from the model's definitions with N x N matrices and plain
//! Gaussian conditioning, without going through the low-rank code.

#![allow(dead_code)]

use std::f64::consts::PI;

use frk_core::basis::BasisSet;
use frk_core::geometry::{Location, Measurement};
use frk_core::model::ModelParams;
use frk_core::trend::TrendSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Problem {
    pub obs: Vec<Measurement>,
    pub basis: BasisSet,
    pub trend: TrendSpec,
    pub params: ModelParams,
}

pub fn bisquare(d: f64, tau: f64) -> f64 {
    if d < tau {
        let u = 1.0 - (d / tau).powi(2);
        u * u
    } else {
        0.0
    }
}

/// A random small problem: N points, r centers, random parameters.
pub fn random_problem(n: usize, r: usize, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trend = TrendSpec::omni(Location::new(rng.random_range(-300.0..-50.0), rng.random_range(-300.0..700.0)));
    let tau = rng.random_range(150.0..300.0);
    let mut centers = Vec::new();
    while centers.len() < r {
        let c = Location::new(rng.random_range(0.0..600.0), rng.random_range(0.0..600.0));
        if centers.iter().all(|o: &Location| o.distance(&c) > 25.0) {
            centers.push(c);
        }
    }
    let params = ModelParams {
        alpha: vec![rng.random_range(-60.0..-20.0), rng.random_range(1.5..4.0)],
        sigma2: rng.random_range(0.3..5.0),
        beta: rng.random_range(0.05..2.0),
        phi: rng.random_range(40f64..400.0).ln(),
    };
    let obs = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..600.0);
            let y = rng.random_range(0.0..600.0);
            let d = trend.tx_location.distance(&Location::new(x, y));
            let v = params.alpha[0] - 10.0 * params.alpha[1] * d.log10() + rng.random_range(-8.0..8.0);
            Measurement::new(x, y, v)
        })
        .collect();
    Problem { obs, basis: BasisSet::new(centers, tau).unwrap(), trend, params }
}

pub fn s_row(loc: &Location, basis: &BasisSet) -> DVector<f64> {
    DVector::from_iterator(basis.len(), basis.centers.iter().map(|c| bisquare(loc.distance(c), basis.tau)))
}

pub fn t_row(loc: &Location, trend: &TrendSpec) -> DVector<f64> {
    let d = loc.distance(&trend.tx_location).max(trend.min_dist);
    DVector::from_vec(vec![1.0, -10.0 * d.log10()])
}

pub fn dense_s(p: &Problem) -> DMatrix<f64> {
    let rows: Vec<_> = p.obs.iter().map(|m| s_row(&m.loc, &p.basis).transpose()).collect();
    DMatrix::from_rows(&rows)
}

pub fn dense_t(p: &Problem) -> DMatrix<f64> {
    let rows: Vec<_> = p.obs.iter().map(|m| t_row(&m.loc, &p.trend).transpose()).collect();
    DMatrix::from_rows(&rows)
}

pub fn y(p: &Problem) -> DVector<f64> {
    DVector::from_iterator(p.obs.len(), p.obs.iter().map(|m| m.value))
}

pub fn k_matrix(basis: &BasisSet, beta: f64, phi: f64) -> DMatrix<f64> {
    let r = basis.len();
    let range = phi.exp();
    DMatrix::from_fn(r, r, |i, j| (-basis.centers[i].distance(&basis.centers[j]) / range).exp() / beta)
}

pub fn sigma(p: &Problem) -> DMatrix<f64> {
    let s = dense_s(p);
    let k = k_matrix(&p.basis, p.params.beta, p.params.phi);
    let n = p.obs.len();
    &s * k * s.transpose() + DMatrix::identity(n, n) * p.params.sigma2
}

pub fn residual(p: &Problem) -> DVector<f64> {
    y(p) - dense_t(p) * DVector::from_column_slice(&p.params.alpha)
}

pub fn sigma_inv(p: &Problem) -> DMatrix<f64> {
    sigma(p).cholesky().expect("Sigma is PD").inverse()
}

pub fn log_likelihood(p: &Problem) -> f64 {
    let sig = sigma(p);
    let ch = sig.clone().cholesky().unwrap();
    let log_det: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let e = residual(p);
    let n = e.len() as f64;
    -0.5 * log_det - 0.5 * e.dot(&ch.solve(&e)) - 0.5 * n * (2.0 * PI).ln()
}

/// Posterior mean and covariance of eta by joint-Gaussian conditioning.
pub fn eta_posterior(p: &Problem) -> (DVector<f64>, DMatrix<f64>) {
    let s = dense_s(p);
    let k = k_matrix(&p.basis, p.params.beta, p.params.phi);
    let inv = sigma_inv(p);
    let cross = &k * s.transpose();
    (&cross * &inv * residual(p), &k - &cross * &inv * cross.transpose())
}

/// Simple-kriging mean and mean squared prediction error of the smooth field
/// t(x)'alpha + s(x)'eta at `x0`.
pub fn kriging(p: &Problem, x0: &Location) -> (f64, f64) {
    let s = dense_s(p);
    let k = k_matrix(&p.basis, p.params.beta, p.params.phi);
    let s0 = s_row(x0, &p.basis);
    let c0 = &s * &k * &s0; // Cov(Y, field(x0))
    let inv = sigma_inv(p);
    let mean = t_row(x0, &p.trend).dot(&DVector::from_column_slice(&p.params.alpha)) + c0.dot(&(&inv * residual(p)));
    let var = s0.dot(&(&k * &s0)) - c0.dot(&(&inv * &c0));
    (mean, var)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
pub mod workflow;
