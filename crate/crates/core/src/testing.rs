//! Dense reference computations for unit tests. These form Sigma explicitly
//! and condition jointly Gaussian vectors the textbook way, independent of the
//! low-rank code paths under test.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::BasisSet;
use crate::geometry::{Location, Measurement};
use crate::model::{build_design_matrices, DesignMatrices, ModelParams};
use crate::trend::TrendSpec;

pub struct Instance {
    pub obs: Vec<Measurement>,
    pub basis: BasisSet,
    pub trend: TrendSpec,
    pub dm: DesignMatrices,
    pub y: DVector<f64>,
    pub params: ModelParams,
}

/// Random small problem on [0, 500]^2 with r well-separated centers.
pub fn random_instance(n: usize, r: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trend = TrendSpec::omni(Location::new(-60.0, -40.0));
    let mut centers: Vec<Location> = Vec::new();
    while centers.len() < r {
        let c = Location::new(rng.random_range(50.0..450.0), rng.random_range(50.0..450.0));
        if centers.iter().all(|o| o.distance(&c) > 20.0) {
            centers.push(c);
        }
    }
    let basis = BasisSet::new(centers, 220.0).unwrap();
    let params = ModelParams {
        alpha: vec![rng.random_range(-50.0..-30.0), rng.random_range(2.0..3.5)],
        sigma2: rng.random_range(0.5..2.0),
        beta: rng.random_range(0.3..2.0),
        phi: rng.random_range(80f64..250.0).ln(),
    };
    let obs: Vec<Measurement> = (0..n)
        .map(|_| {
            let x = rng.random_range(0.0..500.0);
            let y = rng.random_range(0.0..500.0);
            let d = trend.tx_location.distance(&Location::new(x, y));
            let mean = params.alpha[0] - 10.0 * params.alpha[1] * d.log10();
            Measurement::new(x, y, mean + rng.random_range(-6.0..6.0))
        })
        .collect();
    let dm = build_design_matrices(&obs, &basis, &trend).unwrap();
    let y = DVector::from_iterator(n, obs.iter().map(|m| m.value));
    Instance { obs, basis, trend, dm, y, params }
}

pub fn dense_k(basis: &BasisSet, params: &ModelParams) -> DMatrix<f64> {
    let r = basis.len();
    DMatrix::from_fn(r, r, |i, j| {
        (-basis.centers[i].distance(&basis.centers[j]) / params.phi.exp()).exp() / params.beta
    })
}

pub fn dense_sigma(inst: &Instance) -> DMatrix<f64> {
    let s = inst.dm.s.to_dense();
    let k = dense_k(&inst.basis, &inst.params);
    &s * k * s.transpose() + DMatrix::identity(inst.y.len(), inst.y.len()) * inst.params.sigma2
}

pub fn dense_log_likelihood(inst: &Instance) -> f64 {
    let sigma = dense_sigma(inst);
    let e = &inst.y - &inst.dm.t * inst.params.alpha_vec();
    let n = e.len() as f64;
    let inv = sigma.clone().try_inverse().unwrap();
    let det = sigma.determinant();
    -0.5 * det.ln() - 0.5 * (e.transpose() * inv * &e)[0] - 0.5 * n * (2.0 * PI).ln()
}

/// Posterior of eta by conditioning the joint Gaussian (eta, Y):
/// mean = K S' Sigma^{-1} e, cov = K - K S' Sigma^{-1} S K.
pub fn dense_eta_posterior(inst: &Instance) -> (DVector<f64>, DMatrix<f64>) {
    let s = inst.dm.s.to_dense();
    let k = dense_k(&inst.basis, &inst.params);
    let inv = dense_sigma(inst).try_inverse().unwrap();
    let e = &inst.y - &inst.dm.t * inst.params.alpha_vec();
    let cross = &k * s.transpose();
    let mean = &cross * &inv * e;
    let cov = &k - &cross * &inv * cross.transpose();
    (mean, cov)
}
