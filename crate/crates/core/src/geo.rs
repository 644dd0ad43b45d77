//! Spherical-earth geodesy and the raw trajectory model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Below this many seconds two fixes are treated as simultaneous.
pub const MIN_DT_S: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsPoint {
    pub lat: f64,
    pub lon: f64,
    /// Seconds; epoch-based or trajectory-relative.
    pub t: f64,
}

impl GpsPoint {
    pub fn new(lat: f64, lon: f64, t: f64) -> Result<Self> {
        let p = GpsPoint { lat, lon, t };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::InvalidPoint(format!(
                "lat {} / lon {} out of range",
                self.lat, self.lon
            )));
        }
        if !self.t.is_finite() {
            return Err(Error::InvalidPoint(format!("timestamp {} not finite", self.t)));
        }
        Ok(())
    }

    pub fn same_position(&self, other: &GpsPoint) -> bool {
        self.lat == other.lat && self.lon == other.lon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<GpsPoint>,
}

impl Trajectory {
    /// Builds a trajectory, checking point validity, non-emptiness and
    /// non-decreasing timestamps.
    pub fn new(id: impl Into<String>, points: Vec<GpsPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        for p in &points {
            p.validate()?;
        }
        for w in points.windows(2) {
            if w[1].t < w[0].t {
                return Err(Error::TimeOrder {
                    earlier: w[0].t,
                    later: w[1].t,
                });
            }
        }
        Ok(Trajectory {
            id: id.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: &GpsPoint, b: &GpsPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Initial great-circle bearing from `a` to `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    /// Degrees clockwise from north in `[0, 360)`.
    pub degrees: f64,
    /// Set when the two points coincide; `degrees` is then 0.
    pub degenerate: bool,
}

pub fn bearing_deg(a: &GpsPoint, b: &GpsPoint) -> Bearing {
    if a.same_position(b) {
        return Bearing {
            degrees: 0.0,
            degenerate: true,
        };
    }
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    let mut deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    if deg >= 360.0 {
        deg = 0.0;
    }
    Bearing {
        degrees: deg,
        degenerate: false,
    }
}

/// Segment speed in m/s. Simultaneous fixes yield 0.
pub fn speed_mps(a: &GpsPoint, b: &GpsPoint) -> Result<f64> {
    let dt = b.t - a.t;
    if dt < 0.0 {
        return Err(Error::TimeOrder {
            earlier: a.t,
            later: b.t,
        });
    }
    if dt < MIN_DT_S {
        return Ok(0.0);
    }
    Ok(haversine_m(a, b) / dt)
}
