//! Method-of-moments estimation of (sigma^2, K) from binned residuals, with
//! diagnostics explaining when the estimate of K fails to be positive
//! definite.
//!
//! Observations are assigned to the nearest of M bin centers (0/1 weights).
//! With OLS residuals D, per-bin means Dbar and per-bin mean squares V, the
//! empirical covariance of the bins is `Dbar_l Dbar_k` off the diagonal and
//! `V_k` on it. Fitting `sigma^2 I + S_M K S_M'` to it in Frobenius norm, with
//! `S_M = QR`, gives
//!
//! ```text
//! sigma2_hat = Tr((I - QQ') Sigma_M) / (M - r)
//! K_hat      = R^{-1} Q'(Sigma_M - sigma2_hat I) Q R^{-T}
//! ```
//!
//! Sigma_M is always PSD. K_hat is PD exactly when sigma2_hat is below the
//! smallest eigenvalue of Q' Sigma_M Q, and sigma2_hat can never be below the
//! smallest eigenvalue of Sigma_M whose eigenvector leaves col(Q). When every
//! eigenvector of the smallest eigenvalue lies inside col(Q), K_hat is
//! necessarily singular or indefinite.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::BasisMatrix;
use crate::error::{FrkError, Result};
use crate::geometry::{BoundingBox, Location, Measurement};
use crate::linalg;
use crate::model::{observation_vector, DesignMatrices};

/// Relative tolerance used when comparing eigen-quantities.
const EIG_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmptyBinPolicy {
    /// Remove empty bins; M shrinks accordingly.
    #[default]
    Drop,
    Error,
}

/// Hard nearest-center assignment of observations to bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bin_centers: Vec<Location>,
    /// Bin index of every observation.
    pub assignment: Vec<usize>,
    pub counts: Vec<usize>,
}

impl Binning {
    pub fn m(&self) -> usize {
        self.bin_centers.len()
    }

    /// W_lj: 1 when observation j belongs to bin l.
    pub fn weight(&self, bin: usize, obs: usize) -> f64 {
        if self.assignment[obs] == bin {
            1.0
        } else {
            0.0
        }
    }

    /// Row averages of a sparse N x r matrix over the bins (M x r).
    pub fn average_rows(&self, s: &BasisMatrix) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m(), s.ncols());
        for (i, &b) in self.assignment.iter().enumerate() {
            for &(j, v) in s.row(i) {
                out[(b, j)] += v;
            }
        }
        for (b, &c) in self.counts.iter().enumerate() {
            out.row_mut(b).scale_mut(1.0 / c as f64);
        }
        out
    }
}

/// Default number of bins: ceil(4r) clipped to (r, N/4].
pub fn default_bin_count(r: usize, n: usize) -> usize {
    (4 * r).min(n / 4).max(r + 1)
}

/// Regular layout of at least `m` cells over `area`, each bin centered in
/// its cell; the nearest center of a point is the center of its cell.
fn bin_layout(area: &BoundingBox, m: usize) -> (usize, usize) {
    let (w, h) = (area.width().max(1e-9), area.height().max(1e-9));
    let nx = ((m as f64 * w / h).sqrt().round() as usize).clamp(1, m);
    let ny = m.div_ceil(nx);
    (nx, ny)
}

pub fn assign_bins(locs: &[Location], m: usize, policy: EmptyBinPolicy) -> Result<Binning> {
    if m == 0 || locs.is_empty() {
        return Err(FrkError::InvalidParameter("binning needs M >= 1 and observations".into()));
    }
    let area = BoundingBox::enclosing(locs).ok_or_else(|| FrkError::InvalidParameter("no locations".into()))?;
    let (nx, ny) = bin_layout(&area, m);
    let cw = area.width() / nx as f64;
    let ch = area.height() / ny as f64;
    let cell = |v: f64, lo: f64, size: f64, n: usize| -> usize {
        if size > 0.0 {
            (((v - lo) / size).floor().max(0.0) as usize).min(n - 1)
        } else {
            0
        }
    };
    let raw: Vec<usize> = locs
        .iter()
        .map(|l| cell(l.y, area.min.y, ch, ny) * nx + cell(l.x, area.min.x, cw, nx))
        .collect();
    let mut counts = vec![0usize; nx * ny];
    for &b in &raw {
        counts[b] += 1;
    }
    if policy == EmptyBinPolicy::Error {
        if let Some(bin) = counts.iter().position(|&c| c == 0) {
            return Err(FrkError::EmptyBin { bin });
        }
    }
    let mut remap = vec![usize::MAX; nx * ny];
    let mut centers = Vec::new();
    let mut kept = Vec::new();
    for (b, &c) in counts.iter().enumerate() {
        if c > 0 {
            remap[b] = centers.len();
            let (iy, ix) = (b / nx, b % nx);
            centers.push(Location::new(
                area.min.x + (ix as f64 + 0.5) * cw,
                area.min.y + (iy as f64 + 0.5) * ch,
            ));
            kept.push(c);
        }
    }
    Ok(Binning {
        bin_centers: centers,
        assignment: raw.iter().map(|&b| remap[b]).collect(),
        counts: kept,
    })
}

/// Binned residual summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedResiduals {
    pub binning: Binning,
    /// OLS residuals, one per observation.
    pub d: DVector<f64>,
    pub d_bar: DVector<f64>,
    pub v: DVector<f64>,
}

pub fn ols_residuals(y: &DVector<f64>, t: &DMatrix<f64>) -> Result<DVector<f64>> {
    let ch = linalg::cholesky(&(t.transpose() * t), "T'T")?;
    let alpha = ch.solve(&(t.transpose() * y));
    Ok(y - t * alpha)
}

/// Per-bin means and mean squares of arbitrary residuals.
pub fn bin_summaries(binning: &Binning, d: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let m = binning.m();
    let mut d_bar = DVector::zeros(m);
    let mut v = DVector::zeros(m);
    for (i, &b) in binning.assignment.iter().enumerate() {
        d_bar[b] += d[i];
        v[b] += d[i] * d[i];
    }
    for b in 0..m {
        let c = binning.counts[b] as f64;
        d_bar[b] /= c;
        v[b] /= c;
    }
    (d_bar, v)
}

pub fn bin_observations(
    obs: &[Measurement],
    dm: &DesignMatrices,
    m: usize,
    policy: EmptyBinPolicy,
) -> Result<BinnedResiduals> {
    let n = obs.len();
    if n != dm.n() {
        return Err(FrkError::LengthMismatch { left: n, right: dm.n() });
    }
    if !(dm.r() < m && m < n) {
        return Err(FrkError::InvalidParameter(format!(
            "need r < M < N, got r = {}, M = {m}, N = {n}",
            dm.r()
        )));
    }
    let locs: Vec<Location> = obs.iter().map(|o| o.loc).collect();
    let binning = assign_bins(&locs, m, policy)?;
    let d = ols_residuals(&observation_vector(obs), &dm.t)?;
    let (d_bar, v) = bin_summaries(&binning, &d);
    Ok(BinnedResiduals { binning, d, d_bar, v })
}

/// Dbar_l Dbar_k off the diagonal, V_k on it.
pub fn sigma_hat_m(d_bar: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let mut s = d_bar * d_bar.transpose();
    s.set_diagonal(v);
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentsDiagnostics {
    /// Sigma_M is PSD (smallest eigenvalue >= -1e-10 * largest magnitude).
    pub psd_ok: bool,
    pub sigma_m_min_eigenvalue: f64,
    /// Smallest eigenvalue of Sigma_M among eigenvectors not contained in
    /// col(Q); sigma2_hat can never be below it.
    pub sigma2_lower_bound: f64,
    pub sigma2_hat: f64,
    /// lambda_min(Q' Sigma_M Q).
    pub qsq_min_eigenvalue: f64,
    /// lambda_min(Q' Sigma_M Q) - sigma2_hat; K_hat is PD iff positive.
    pub k_hat_pd_margin: f64,
    pub k_hat_pd: bool,
    /// Every bin holds two observations with different residuals.
    pub all_bins_spread: bool,
    pub flat_bins: Vec<usize>,
    /// Every eigenvector of the smallest eigenvalue of Sigma_M lies in col(Q),
    /// which rules out a PD K_hat when that eigenvalue is positive.
    pub min_eigenspace_in_col_q: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentsResult {
    pub sigma2_hat: f64,
    pub k_hat: DMatrix<f64>,
    pub sigma_hat_m: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r_factor: DMatrix<f64>,
    pub diagnostics: MomentsDiagnostics,
    /// K_hat had its small eigenvalues lifted.
    pub repaired: bool,
}

/// Thin QR of S_M with a column-rank check.
fn thin_qr(s_m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = s_m.ncols();
    let qr = s_m.clone().qr();
    let rf = qr.r();
    let diag_max = rf.diagonal().amax();
    let rank = rf.diagonal().iter().filter(|d| d.abs() > 1e-10 * diag_max.max(f64::MIN_POSITIVE)).count();
    if rank < r || diag_max == 0.0 {
        return Err(FrkError::RankDeficientBinnedBasis { rank, r });
    }
    Ok((qr.q(), rf))
}

/// Bins' residual covariance fit; `bin_residuals` supplies Dbar and V (for
/// the per-bin check) when available.
pub fn fit_moments(
    sigma_hat: &DMatrix<f64>,
    s_m: &DMatrix<f64>,
    bin_residuals: Option<&BinnedResiduals>,
    repair: bool,
) -> Result<MomentsResult> {
    let (m, r) = s_m.shape();
    if sigma_hat.nrows() != m || sigma_hat.ncols() != m {
        return Err(FrkError::LengthMismatch { left: sigma_hat.nrows(), right: m });
    }
    if m <= r {
        return Err(FrkError::InvalidParameter(format!("need M > r, got M = {m}, r = {r}")));
    }
    let (q, rf) = thin_qr(s_m)?;
    let mut qsq = q.transpose() * sigma_hat * &q;
    linalg::symmetrize(&mut qsq);
    let sigma2_hat = (sigma_hat.trace() - qsq.trace()) / (m - r) as f64;

    let rinv = rf
        .clone()
        .try_inverse()
        .ok_or(FrkError::RankDeficientBinnedBasis { rank: r - 1, r })?;
    let mut inner = qsq.clone();
    for i in 0..r {
        inner[(i, i)] -= sigma2_hat;
    }
    let mut k_hat = &rinv * inner * rinv.transpose();
    linalg::symmetrize(&mut k_hat);

    let diagnostics = moments_diagnostics(sigma_hat, &q, sigma2_hat, bin_residuals);
    let mut repaired = false;
    if repair && !diagnostics.k_hat_pd {
        k_hat = lift_eigenvalues(&k_hat);
        repaired = true;
    }
    Ok(MomentsResult {
        sigma2_hat,
        k_hat,
        sigma_hat_m: sigma_hat.clone(),
        q,
        r_factor: rf,
        diagnostics,
        repaired,
    })
}

/// Raises every eigenvalue of a symmetric matrix to at least
/// `1e-8 * |Tr| / r`.
pub fn lift_eigenvalues(k: &DMatrix<f64>) -> DMatrix<f64> {
    let r = k.nrows();
    let tr = k.trace().abs();
    let eps = if tr > 0.0 { 1e-8 * tr / r as f64 } else { 1e-8 };
    let eig = SymmetricEigen::new(k.clone());
    let lifted = eig.eigenvalues.map(|l| l.max(eps));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose();
    linalg::symmetrize(&mut out);
    out
}

pub fn moments_diagnostics(
    sigma_hat: &DMatrix<f64>,
    q: &DMatrix<f64>,
    sigma2_hat: f64,
    bin_residuals: Option<&BinnedResiduals>,
) -> MomentsDiagnostics {
    let eig = SymmetricEigen::new(sigma_hat.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let lambda_min = eig.eigenvalues.min();

    // B_jj = 1 - ||Q' u_j||^2 for each unit eigenvector u_j.
    let proj = q.transpose() * &eig.eigenvectors;
    let mut lower = f64::INFINITY;
    let mut min_space_inside = true;
    for j in 0..eig.eigenvalues.len() {
        let b_jj = 1.0 - proj.column(j).norm_squared();
        let leaves = b_jj > 1e-8;
        if leaves {
            lower = lower.min(eig.eigenvalues[j]);
        }
        if (eig.eigenvalues[j] - lambda_min).abs() <= 1e-8 * scale && leaves {
            min_space_inside = false;
        }
    }

    let mut qsq = q.transpose() * sigma_hat * q;
    linalg::symmetrize(&mut qsq);
    let qsq_min = linalg::min_eigenvalue(&qsq);
    let margin = qsq_min - sigma2_hat;

    let violating: Vec<usize> = match bin_residuals {
        Some(br) => flat_bins(&br.binning, &br.d),
        None => Vec::new(),
    };
    MomentsDiagnostics {
        psd_ok: lambda_min >= -EIG_TOL * scale,
        sigma_m_min_eigenvalue: lambda_min,
        sigma2_lower_bound: lower,
        sigma2_hat,
        qsq_min_eigenvalue: qsq_min,
        k_hat_pd_margin: margin,
        k_hat_pd: margin > EIG_TOL * scale,
        all_bins_spread: bin_residuals.is_some() && violating.is_empty(),
        flat_bins: violating,
        min_eigenspace_in_col_q: min_space_inside,
    }
}

/// Bins without two observations of different residual.
pub fn flat_bins(binning: &Binning, d: &DVector<f64>) -> Vec<usize> {
    let mut first: Vec<Option<f64>> = vec![None; binning.m()];
    let mut distinct = vec![false; binning.m()];
    for (i, &b) in binning.assignment.iter().enumerate() {
        match first[b] {
            None => first[b] = Some(d[i]),
            Some(v) if v != d[i] => distinct[b] = true,
            _ => {}
        }
    }
    distinct.iter().enumerate().filter(|(_, &ok)| !ok).map(|(b, _)| b).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentsConfig {
    /// Number of bins; `None` picks the default from r and N.
    pub bins: Option<usize>,
    pub empty_bins: EmptyBinPolicy,
    pub repair: bool,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            bins: None,
            empty_bins: EmptyBinPolicy::Drop,
            repair: false,
        }
    }
}

/// Bins the residuals of `obs` and fits (sigma^2, K).
pub fn estimate_moments(
    obs: &[Measurement],
    dm: &DesignMatrices,
    config: &MomentsConfig,
) -> Result<(BinnedResiduals, MomentsResult)> {
    let m = config.bins.unwrap_or_else(|| default_bin_count(dm.r(), dm.n()));
    let binned = bin_observations(obs, dm, m, config.empty_bins)?;
    let m_eff = binned.binning.m();
    if m_eff <= dm.r() {
        return Err(FrkError::InvalidParameter(format!(
            "only {m_eff} non-empty bins for r = {}",
            dm.r()
        )));
    }
    let s_m = binned.binning.average_rows(&dm.s);
    let sigma = sigma_hat_m(&binned.d_bar, &binned.v);
    let result = fit_moments(&sigma, &s_m, Some(&binned), config.repair)?;
    Ok((binned, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::random_instance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_full_rank(m: usize, r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(m, r, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn constant_residuals() {
        let binning = assign_bins(
            &(0..40).map(|i| Location::new((i % 8) as f64, (i / 8) as f64)).collect::<Vec<_>>(),
            4,
            EmptyBinPolicy::Drop,
        )
        .unwrap();
        let d = DVector::from_element(40, 1.5);
        let (d_bar, v) = bin_summaries(&binning, &d);
        assert!(d_bar.iter().all(|&x| x == 1.5));
        assert!(v.iter().all(|&x| x == 2.25));
        assert_eq!(flat_bins(&binning, &d).len(), binning.m());
    }

    #[test]
    fn one_observation_per_bin() {
        let locs: Vec<_> = (0..9).map(|i| Location::new((i % 3) as f64 * 10.0, (i / 3) as f64 * 10.0)).collect();
        let binning = assign_bins(&locs, 9, EmptyBinPolicy::Error).unwrap();
        assert!(binning.counts.iter().all(|&c| c == 1));
        let d = DVector::from_fn(9, |i, _| i as f64 - 3.0);
        let (d_bar, v) = bin_summaries(&binning, &d);
        for (i, &b) in binning.assignment.iter().enumerate() {
            assert_eq!(d_bar[b], d[i]);
            assert_eq!(v[b], d[i] * d[i]);
        }
        let s = sigma_hat_m(&d_bar, &v);
        assert!((&s - &d_bar * d_bar.transpose()).amax() == 0.0);
    }

    #[test]
    fn summaries_match_loop() {
        let inst = random_instance(150, 5, 4);
        let br = bin_observations(&inst.obs, &inst.dm, 12, EmptyBinPolicy::Drop).unwrap();
        for b in 0..br.binning.m() {
            let members: Vec<f64> = (0..150).filter(|&i| br.binning.weight(b, i) > 0.0).map(|i| br.d[i]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            let sq = members.iter().map(|x| x * x).sum::<f64>() / members.len() as f64;
            assert!((br.d_bar[b] - mean).abs() < 1e-12);
            assert!((br.v[b] - sq).abs() < 1e-10);
            assert!(br.v[b] >= br.d_bar[b] * br.d_bar[b] - 1e-12);
        }
    }

    #[test]
    fn empty_bin_policies() {
        let locs = vec![Location::new(0.0, 0.0), Location::new(100.0, 100.0), Location::new(1.0, 2.0)];
        assert!(matches!(assign_bins(&locs, 4, EmptyBinPolicy::Error), Err(FrkError::EmptyBin { .. })));
        let b = assign_bins(&locs, 4, EmptyBinPolicy::Drop).unwrap();
        assert_eq!(b.m(), 2);
    }

    #[test]
    fn white_noise_gives_zero_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s_m = random_full_rank(10, 3, &mut rng);
        let res = fit_moments(&(DMatrix::identity(10, 10) * 2.5), &s_m, None, false).unwrap();
        assert!((res.sigma2_hat - 2.5).abs() < 1e-12);
        assert!(res.k_hat.amax() < 1e-10);
        assert!(!res.diagnostics.k_hat_pd);
    }

    #[test]
    fn exact_structure_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s_m = random_full_rank(12, 4, &mut rng);
        let a = random_full_rank(4, 4, &mut rng);
        let k = &a * a.transpose() + DMatrix::identity(4, 4);
        let sigma = DMatrix::identity(12, 12) * 1.7 + &s_m * &k * s_m.transpose();
        let res = fit_moments(&sigma, &s_m, None, false).unwrap();
        assert!((res.sigma2_hat - 1.7).abs() < 1e-10);
        assert!((&res.k_hat - &k).amax() < 1e-10);
        assert!(res.diagnostics.k_hat_pd);
    }

    #[test]
    fn rank_deficient_binned_basis() {
        let mut s_m = DMatrix::from_element(6, 2, 1.0);
        s_m[(0, 0)] = 1.0;
        assert!(matches!(
            fit_moments(&DMatrix::identity(6, 6), &s_m, None, false),
            Err(FrkError::RankDeficientBinnedBasis { .. })
        ));
    }

    #[test]
    fn repair_lifts_to_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s_m = random_full_rank(10, 3, &mut rng);
        let res = fit_moments(&(DMatrix::identity(10, 10) * 2.5), &s_m, None, true).unwrap();
        assert!(res.repaired);
        assert!(linalg::min_eigenvalue(&res.k_hat) > 0.0);
    }
}
