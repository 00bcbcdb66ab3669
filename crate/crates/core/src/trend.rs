//! Large-scale trend: log-distance path loss plus an optional antenna gain.
//!
//! Distances enter as `-10 * log10(dist)`. The path-loss formula is written
//! with "ln10" in some references; it is the base-10 logarithm, matching the
//! usual `10 * kappa` decibel convention.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};
use crate::geometry::Location;
use crate::multicell::AntennaSpec;

pub const DEFAULT_MIN_DIST: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub tx_location: Location,
    /// When present, the trend gains a third column G(x) and the model a
    /// gain scale coefficient.
    pub gain_model: Option<AntennaSpec>,
    /// Floor applied to dist(x) before taking the logarithm.
    pub min_dist: f64,
}

impl TrendSpec {
    pub fn omni(tx_location: Location) -> Self {
        Self {
            tx_location,
            gain_model: None,
            min_dist: DEFAULT_MIN_DIST,
        }
    }

    pub fn directional(antenna: AntennaSpec) -> Self {
        Self {
            tx_location: antenna.site,
            gain_model: Some(antenna),
            min_dist: DEFAULT_MIN_DIST,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_dist > 0.0) || !self.min_dist.is_finite() {
            return Err(FrkError::InvalidParameter(format!(
                "min_dist must be finite and > 0, got {}",
                self.min_dist
            )));
        }
        if !self.tx_location.is_finite() {
            return Err(FrkError::InvalidParameter("transmitter location is not finite".into()));
        }
        if let Some(g) = &self.gain_model {
            g.validate()?;
        }
        Ok(())
    }

    /// Number of trend coefficients (2 without gain, 3 with).
    pub fn p(&self) -> usize {
        if self.gain_model.is_some() {
            3
        } else {
            2
        }
    }

    /// `-10 log10(max(dist, min_dist))`.
    pub fn log_distance_term(&self, loc: &Location) -> f64 {
        let d = self.tx_location.distance(loc).max(self.min_dist);
        -10.0 * d.log10()
    }
}

/// t(x) = (1, -10 log10 dist(x) [, G(x)]).
pub fn trend_vector(loc: &Location, spec: &TrendSpec) -> DVector<f64> {
    let mut t = DVector::zeros(spec.p());
    t[0] = 1.0;
    t[1] = spec.log_distance_term(loc);
    if let Some(g) = &spec.gain_model {
        t[2] = g.gain(loc);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_distance_values() {
        let spec = TrendSpec::omni(Location::new(0.0, 0.0));
        assert_eq!(trend_vector(&Location::new(1.0, 0.0), &spec).as_slice(), &[1.0, 0.0]);
        let t = trend_vector(&Location::new(0.0, 100.0), &spec);
        assert_eq!(t[0], 1.0);
        assert!((t[1] + 20.0).abs() < 1e-12);
    }

    #[test]
    fn distance_is_floored() {
        let spec = TrendSpec::omni(Location::new(5.0, 5.0));
        assert_eq!(trend_vector(&Location::new(5.0, 5.0), &spec)[1], 0.0);
        let mut far = spec.clone();
        far.min_dist = 10.0;
        assert!((trend_vector(&Location::new(5.0, 5.0), &far)[1] + 10.0).abs() < 1e-12);
    }

    #[test]
    fn boresight_gain_column() {
        let antenna = AntennaSpec::new(Location::new(0.0, 0.0), 90.0);
        let spec = TrendSpec::directional(antenna);
        let t = trend_vector(&Location::new(0.0, 100.0), &spec);
        assert_eq!(t.len(), 3);
        assert!((t[1] + 20.0).abs() < 1e-12);
        assert!(t[2].abs() < 1e-12);
    }

    #[test]
    fn invalid_min_dist() {
        let mut spec = TrendSpec::omni(Location::new(0.0, 0.0));
        spec.min_dist = 0.0;
        assert!(spec.validate().is_err());
    }
}
