//! Planar locations, measurements and bounding boxes.
//!
//! Coordinates are projected easting/northing in meters. No geodesy is done
//! anywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bearing of `other` seen from `self`, in degrees counter-clockwise from
    /// the +x axis, in (-180, 180].
    pub fn bearing_to(&self, other: &Location) -> f64 {
        (other.y - self.y).atan2(other.x - self.x).to_degrees()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A geo-located received-power sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub loc: Location,
    /// Received power in dB.
    pub value: f64,
    /// Serving cell identifier; only present in multicell data sets.
    pub cid: Option<String>,
}

impl Measurement {
    pub fn new(x: f64, y: f64, value: f64) -> Self {
        Self {
            loc: Location::new(x, y),
            value,
            cid: None,
        }
    }

    pub fn with_cid(mut self, cid: impl Into<String>) -> Self {
        self.cid = Some(cid.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Location,
    pub max: Location,
}

impl BoundingBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let bbox = Self {
            min: Location::new(min_x, min_y),
            max: Location::new(max_x, max_y),
        };
        if !(bbox.min.is_finite() && bbox.max.is_finite()) || max_x < min_x || max_y < min_y {
            return Err(FrkError::InvalidParameter(format!(
                "bounding box [{min_x}, {max_x}] x [{min_y}, {max_y}] is not valid"
            )));
        }
        Ok(bbox)
    }

    /// Smallest box containing every location. `None` for an empty slice.
    pub fn enclosing<'a>(locs: impl IntoIterator<Item = &'a Location>) -> Option<Self> {
        let mut it = locs.into_iter();
        let first = *it.next()?;
        let (mut min, mut max) = (first, first);
        for l in it {
            min.x = min.x.min(l.x);
            min.y = min.y.min(l.y);
            max.x = max.x.max(l.x);
            max.y = max.y.max(l.y);
        }
        Some(Self { min, max })
    }

    pub fn of_measurements(obs: &[Measurement]) -> Option<Self> {
        Self::enclosing(obs.iter().map(|m| &m.loc))
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, loc: &Location) -> bool {
        loc.x >= self.min.x && loc.x <= self.max.x && loc.y >= self.min.y && loc.y <= self.max.y
    }
}
