//! Seeded generators for synthetic drive-test data.
//!
//! Noise levels are variances in dB^2. Every generator draws from a
//! `ChaCha8Rng` seeded from the scenario, so the same scenario always yields
//! bit-identical data.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{candidate_grid, BasisSet};
use crate::error::{FrkError, Result};
use crate::geometry::{BoundingBox, Location, Measurement};
use crate::linalg;
use crate::model::covariance_K;
use crate::multicell::AntennaSpec;
use crate::prediction::GridSpec;
use crate::trend::{trend_vector, TrendSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Every point of a regular grid with this step.
    Grid { step: f64 },
    /// `n` points drawn uniformly in the box.
    Uniform { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub bbox: BoundingBox,
    pub sampling: Sampling,
    pub trend: TrendSpec,
    /// Trend coefficients (p_t, kappa[, gain scale]).
    pub alpha: Vec<f64>,
    /// Variance of the additive white noise, dB^2.
    pub noise_var: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        self.trend.validate()?;
        if self.alpha.len() != self.trend.p() {
            return Err(FrkError::LengthMismatch { left: self.alpha.len(), right: self.trend.p() });
        }
        if !(self.noise_var >= 0.0) {
            return Err(FrkError::InvalidParameter(format!("noise variance must be >= 0, got {}", self.noise_var)));
        }
        Ok(())
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn trend_at(&self, loc: &Location) -> f64 {
        trend_vector(loc, &self.trend).as_slice().iter().zip(&self.alpha).map(|(t, a)| t * a).sum()
    }
}

pub fn sample_locations(bbox: &BoundingBox, sampling: Sampling, rng: &mut impl Rng) -> Result<Vec<Location>> {
    match sampling {
        Sampling::Grid { step } => Ok(GridSpec::covering(bbox, step)?.points()),
        Sampling::Uniform { n } => Ok((0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                Location::new(bbox.min.x + u * bbox.width(), bbox.min.y + v * bbox.height())
            })
            .collect()),
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Trend plus white noise of variance `noise_var`.
pub fn gen_lognormal(spec: &ScenarioSpec) -> Result<Vec<Measurement>> {
    spec.validate()?;
    let mut rng = spec.rng();
    let locs = sample_locations(&spec.bbox, spec.sampling, &mut rng)?;
    let sd = spec.noise_var.sqrt();
    Ok(locs
        .into_iter()
        .map(|l| {
            let eps = normal(&mut rng);
            Measurement::new(l.x, l.y, spec.trend_at(&l) + sd * eps)
        })
        .collect())
}

/// eta ~ N(0, K(beta, phi)) through the Cholesky factor of K.
pub fn draw_eta(basis: &BasisSet, beta: f64, phi: f64, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let k = covariance_K(basis, beta, phi)?;
    let l = linalg::cholesky(&k, "K")?.l();
    let z = DVector::from_iterator(basis.len(), (0..basis.len()).map(|_| normal(rng)));
    Ok(l * z)
}

/// Trend plus the basis field `s(x)'eta` plus white noise. Returns the
/// measurements and the drawn eta.
pub fn gen_frk(spec: &ScenarioSpec, basis: &BasisSet, beta: f64, phi: f64) -> Result<(Vec<Measurement>, DVector<f64>)> {
    spec.validate()?;
    let mut rng = spec.rng();
    let locs = sample_locations(&spec.bbox, spec.sampling, &mut rng)?;
    let eta = draw_eta(basis, beta, phi, &mut rng)?;
    let ev = basis.evaluator();
    let sd = spec.noise_var.sqrt();
    let obs = locs
        .into_iter()
        .map(|l| {
            let field: f64 = ev.eval_sparse(&l).iter().map(|&(j, v)| v * eta[j]).sum();
            let eps = normal(&mut rng);
            Measurement::new(l.x, l.y, spec.trend_at(&l) + field + sd * eps)
        })
        .collect();
    Ok((obs, eta))
}

/// A basis made of every candidate grid center over the box (no pruning).
pub fn truth_basis(bbox: &BoundingBox, tau: f64) -> Result<BasisSet> {
    BasisSet::new(candidate_grid(bbox, tau)?, tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTruth {
    pub cid: String,
    pub antenna: AntennaSpec,
    /// (p_t, kappa, gain scale).
    pub alpha: [f64; 3],
    pub beta: f64,
    pub phi: f64,
}

impl CellTruth {
    fn trend(&self, min_dist: f64) -> TrendSpec {
        let mut t = TrendSpec::directional(self.antenna.clone());
        t.min_dist = min_dist;
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticellScenario {
    pub bbox: BoundingBox,
    pub sampling: Sampling,
    pub cells: Vec<CellTruth>,
    /// Radius of the basis carrying each cell's shadowing field.
    pub tau_truth: f64,
    pub noise_var: f64,
    pub min_dist: f64,
    pub seed: u64,
    /// Label with the strongest noisy value instead of the noiseless one.
    pub label_on_noisy: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticellData {
    pub obs: Vec<Measurement>,
    /// Noiseless received power, one row per point and one column per cell.
    pub truth: DMatrix<f64>,
}

/// Four three-sector sites over a 4075 m x 3025 m area sampled on a 25 m grid
/// (20008 points).
pub fn default_multicell_scenario(seed: u64) -> MulticellScenario {
    let bbox = BoundingBox::new(0.0, 0.0, 4075.0, 3025.0).expect("static box");
    let sites = [
        Location::new(1000.0, 800.0),
        Location::new(3050.0, 750.0),
        Location::new(950.0, 2250.0),
        Location::new(3100.0, 2300.0),
    ];
    let offsets = [0.0, 20.0, 40.0, 10.0];
    let p_t = [-8.0, -10.0, -9.0, -11.0, -7.0, -10.5, -9.5, -8.5, -10.0, -9.0, -11.0, -8.0];
    let mut cells = Vec::new();
    for (s, site) in sites.iter().enumerate() {
        for k in 0..3 {
            let i = 3 * s + k;
            cells.push(CellTruth {
                cid: (i + 1).to_string(),
                antenna: AntennaSpec::new(*site, offsets[s] + 120.0 * k as f64),
                alpha: [p_t[i], 2.73, 1.0],
                beta: 1.0 / 12.5,
                phi: 3.63 + 1.0,
            });
        }
    }
    MulticellScenario {
        bbox,
        sampling: Sampling::Grid { step: 25.0 },
        cells,
        tau_truth: 150.0,
        noise_var: 3.0,
        min_dist: crate::trend::DEFAULT_MIN_DIST,
        seed,
        label_on_noisy: false,
    }
}

/// Generates per-cell fields and labels each point with its strongest cell.
/// The reported value is that cell's noisy power.
pub fn gen_multicell(sc: &MulticellScenario) -> Result<MulticellData> {
    if sc.cells.is_empty() {
        return Err(FrkError::InvalidParameter("scenario has no cells".into()));
    }
    if !(sc.noise_var >= 0.0) {
        return Err(FrkError::InvalidParameter(format!("noise variance must be >= 0, got {}", sc.noise_var)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let locs = sample_locations(&sc.bbox, sc.sampling, &mut rng)?;
    let basis = truth_basis(&sc.bbox, sc.tau_truth)?;
    let ev = basis.evaluator();
    let rows: Vec<Vec<(usize, f64)>> = locs.iter().map(|l| ev.eval_sparse(l)).collect();

    let n = locs.len();
    let c = sc.cells.len();
    let mut truth = DMatrix::zeros(n, c);
    for (j, cell) in sc.cells.iter().enumerate() {
        cell.antenna.validate()?;
        let eta = draw_eta(&basis, cell.beta, cell.phi, &mut rng)?;
        let trend = cell.trend(sc.min_dist);
        for (i, l) in locs.iter().enumerate() {
            let t = trend_vector(l, &trend);
            let mean: f64 = t.iter().zip(&cell.alpha).map(|(a, b)| a * b).sum();
            let field: f64 = rows[i].iter().map(|&(k, v)| v * eta[k]).sum();
            truth[(i, j)] = mean + field;
        }
    }
    let sd = sc.noise_var.sqrt();
    let mut obs = Vec::with_capacity(n);
    for (i, l) in locs.iter().enumerate() {
        let noisy: Vec<f64> = (0..c).map(|j| truth[(i, j)] + sd * normal(&mut rng)).collect();
        let score = |j: usize| if sc.label_on_noisy { noisy[j] } else { truth[(i, j)] };
        let best = (1..c).fold(0, |b, j| if score(j) > score(b) { j } else { b });
        obs.push(Measurement::new(l.x, l.y, noisy[best]).with_cid(sc.cells[best].cid.clone()));
    }
    Ok(MulticellData { obs, truth })
}
