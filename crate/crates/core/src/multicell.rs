//! Per-cell models for sectorized networks and best-serving-cell detection.
//!
//! Each cell i has its own trend (optionally with the horizontal antenna gain
//! as a regressor), its own basis pruned from a shared candidate grid, and its
//! own EM fit on the measurements that reported it as serving cell. The
//! predicted serving cell at x is the eligible cell with the largest predicted
//! power; a cell is eligible when x lies in its coverage domain.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::build_basis_set;
use crate::em::{fit_em, EmConfig};
use crate::error::{FrkError, Result};
use crate::geometry::{BoundingBox, Location, Measurement};
use crate::model::FittedModel;
use crate::prediction::predict_mean;
use crate::trend::{TrendSpec, DEFAULT_MIN_DIST};

pub const DEFAULT_PSI_3DB: f64 = 65.0;
pub const DEFAULT_A_M: f64 = 30.0;
pub const DEFAULT_HALF_ANGLE: f64 = 90.0;

/// Signed difference `a - b` wrapped to (-180, 180].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntennaSpec {
    pub site: Location,
    /// Pointing direction in degrees, counter-clockwise from +x.
    pub azimuth: f64,
    pub psi_3db: f64,
    pub a_m: f64,
}

impl AntennaSpec {
    pub fn new(site: Location, azimuth: f64) -> Self {
        Self {
            site,
            azimuth,
            psi_3db: DEFAULT_PSI_3DB,
            a_m: DEFAULT_A_M,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.psi_3db > 0.0 && self.a_m > 0.0) || !self.azimuth.is_finite() || !self.site.is_finite() {
            return Err(FrkError::InvalidParameter(format!("invalid antenna {self:?}")));
        }
        Ok(())
    }

    /// Angle between the boresight and the direction of `loc`, in [0, 180].
    /// At the site itself the angle is taken as 0.
    pub fn off_axis_angle(&self, loc: &Location) -> f64 {
        if self.site.distance(loc) == 0.0 {
            return 0.0;
        }
        angle_diff(self.site.bearing_to(loc), self.azimuth).abs()
    }

    pub fn gain(&self, loc: &Location) -> f64 {
        gain_at_angle(self.off_axis_angle(loc), self.psi_3db, self.a_m)
    }
}

/// Horizontal sector pattern `-min(12 (psi / psi_3db)^2, A_m)` in dB.
pub fn gain_at_angle(psi: f64, psi_3db: f64, a_m: f64) -> f64 {
    -(12.0 * (psi / psi_3db).powi(2)).min(a_m)
}

pub fn antenna_gain(loc: &Location, antenna: &AntennaSpec) -> f64 {
    antenna.gain(loc)
}

/// Closed wedge around the antenna azimuth, optionally limited in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellDomain {
    pub half_angle: f64,
    pub max_radius: Option<f64>,
}

impl Default for CellDomain {
    fn default() -> Self {
        Self {
            half_angle: DEFAULT_HALF_ANGLE,
            max_radius: None,
        }
    }
}

impl CellDomain {
    pub fn validate(&self) -> Result<()> {
        let radius_ok = self.max_radius.is_none_or(|r| r > 0.0);
        if !(self.half_angle > 0.0 && self.half_angle <= 180.0) || !radius_ok {
            return Err(FrkError::InvalidParameter(format!("invalid cell domain {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, loc: &Location, antenna: &AntennaSpec) -> bool {
        let in_wedge = antenna.off_axis_angle(loc) <= self.half_angle;
        let in_range = self.max_radius.is_none_or(|r| antenna.site.distance(loc) <= r);
        in_wedge && in_range
    }
}

/// A cell to be fitted: identifier, antenna and coverage domain
/// (`None` means the whole plane).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub cid: String,
    pub antenna: AntennaSpec,
    pub domain: Option<CellDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellModel {
    pub cid: String,
    pub antenna: AntennaSpec,
    pub domain: Option<CellDomain>,
    pub fitted: FittedModel,
    pub converged: bool,
    pub iterations: usize,
}

pub fn in_domain(loc: &Location, cell: &CellModel) -> bool {
    cell.domain.is_none_or(|d| d.contains(loc, &cell.antenna))
}

/// Which trend each cell uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrendKind {
    /// Log-distance only.
    Omni,
    /// Log-distance plus the antenna gain regressor.
    Directional,
}

impl TrendKind {
    pub fn spec(self, antenna: &AntennaSpec, min_dist: f64) -> TrendSpec {
        let mut spec = match self {
            TrendKind::Omni => TrendSpec::omni(antenna.site),
            TrendKind::Directional => TrendSpec::directional(antenna.clone()),
        };
        spec.min_dist = min_dist;
        spec
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulticellFitConfig {
    pub tau: f64,
    pub trend: TrendKind,
    pub min_dist: f64,
    pub em: EmConfig,
}

impl MulticellFitConfig {
    pub fn new(tau: f64, trend: TrendKind) -> Self {
        Self {
            tau,
            trend,
            min_dist: DEFAULT_MIN_DIST,
            em: EmConfig::default(),
        }
    }
}

fn fit_one(cell: &CellSpec, obs: &[Measurement], area: &BoundingBox, cfg: &MulticellFitConfig) -> Result<Option<CellModel>> {
    cell.antenna.validate()?;
    if let Some(d) = &cell.domain {
        d.validate()?;
    }
    let own: Vec<Measurement> = obs
        .iter()
        .filter(|m| m.cid.as_deref() == Some(cell.cid.as_str()))
        .cloned()
        .collect();
    let spec = cfg.trend.spec(&cell.antenna, cfg.min_dist);
    if own.len() < spec.p() + 2 {
        log::warn!("cell {} has {} observations; skipped", cell.cid, own.len());
        return Ok(None);
    }
    let locs: Vec<Location> = own.iter().map(|m| m.loc).collect();
    let basis = build_basis_set(area, cfg.tau, &locs)?;
    let (fitted, trace) = fit_em(&own, &basis, &spec, &cfg.em)?;
    log::info!(
        "cell {}: N = {}, r = {}, {} iterations",
        cell.cid,
        own.len(),
        basis.len(),
        trace.iterations()
    );
    Ok(Some(CellModel {
        cid: cell.cid.clone(),
        antenna: cell.antenna.clone(),
        domain: cell.domain,
        fitted,
        converged: trace.converged,
        iterations: trace.iterations(),
    }))
}

/// Fits one model per cell. All cells share the candidate grid built on
/// `area`; each prunes it against its own measurements. Cells with too few
/// measurements are skipped with a warning.
pub fn fit_cells(obs: &[Measurement], cells: &[CellSpec], area: &BoundingBox, cfg: &MulticellFitConfig) -> Result<Vec<CellModel>> {
    let fitted: Vec<Option<CellModel>> = cells
        .par_iter()
        .map(|c| fit_one(c, obs, area, cfg))
        .collect::<Result<_>>()?;
    Ok(fitted.into_iter().flatten().collect())
}

/// Orders identifiers numerically when both are integers, otherwise as text.
pub fn cid_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CidPrediction {
    Covered { cid: String, z_hat: f64 },
    /// No cell counts this location in its domain.
    Uncovered,
}

impl CidPrediction {
    pub fn cid(&self) -> Option<&str> {
        match self {
            CidPrediction::Covered { cid, .. } => Some(cid),
            CidPrediction::Uncovered => None,
        }
    }

    pub fn z_hat(&self) -> Option<f64> {
        match self {
            CidPrediction::Covered { z_hat, .. } => Some(*z_hat),
            CidPrediction::Uncovered => None,
        }
    }
}

/// Picks the best of `(cid, z)` candidates; ties go to the lowest cid.
pub fn argmax_cell<'a>(candidates: impl IntoIterator<Item = (&'a str, f64)>) -> CidPrediction {
    let mut best: Option<(&str, f64)> = None;
    for (cid, z) in candidates {
        best = match best {
            None => Some((cid, z)),
            Some((bc, bz)) => {
                if z > bz || (z == bz && cid_order(cid, bc) == Ordering::Less) {
                    Some((cid, z))
                } else {
                    Some((bc, bz))
                }
            }
        };
    }
    match best {
        Some((cid, z_hat)) => CidPrediction::Covered { cid: cid.to_string(), z_hat },
        None => CidPrediction::Uncovered,
    }
}

pub fn predict_cid_and_power(loc: &Location, cells: &[CellModel]) -> CidPrediction {
    argmax_cell(
        cells
            .iter()
            .filter(|c| in_domain(loc, c))
            .map(|c| (c.cid.as_str(), predict_mean(loc, &c.fitted))),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CidErrorReport {
    pub n: usize,
    pub errors: usize,
    /// Locations no cell was eligible for; included in `errors`.
    pub uncovered: usize,
    pub error_rate: f64,
}

pub fn cid_error_report(test: &[Measurement], cells: &[CellModel]) -> Result<CidErrorReport> {
    if test.is_empty() {
        return Err(FrkError::InvalidParameter("empty test set".into()));
    }
    let outcomes: Vec<(bool, bool)> = test
        .par_iter()
        .map(|m| {
            let pred = predict_cid_and_power(&m.loc, cells);
            let uncovered = pred.cid().is_none();
            (uncovered || pred.cid() != m.cid.as_deref(), uncovered)
        })
        .collect();
    let errors = outcomes.iter().filter(|o| o.0).count();
    let uncovered = outcomes.iter().filter(|o| o.1).count();
    Ok(CidErrorReport {
        n: test.len(),
        errors,
        uncovered,
        error_rate: errors as f64 / test.len() as f64,
    })
}

/// Fraction of test locations whose predicted serving cell differs from the
/// reported one. Uncovered locations count as errors.
pub fn cid_error_rate(test: &[Measurement], cells: &[CellModel]) -> Result<f64> {
    Ok(cid_error_report(test, cells)?.error_rate)
}
