//! Hierarchical spatial partitions.
//!
//! The default `Quad` backend splits a bounding box into `2^r x 2^r`
//! latitude/longitude rectangles. Rows count upward from `lat_min`, columns
//! eastward from `lon_min`, and the cell index is `row * 2^r + col`. Each
//! axis uses half-open intervals `[lo, hi)` except that the box's upper edge
//! belongs to the last row/column. Children nest exactly.
//!
//! The `Hex` backend (feature `hex`) wraps the H3 aperture-7 hierarchy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GpsPoint;

/// Finest QUAD resolution; keeps `row * 2^r + col` within 64 bits.
pub const QUAD_MAX_RESOLUTION: u8 = 30;
pub const HEX_MAX_RESOLUTION: u8 = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Quad,
    Hex,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Quad => "quad",
            Backend::Hex => "hex",
        })
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quad" | "QUAD" => Ok(Backend::Quad),
            "hex" | "HEX" => Ok(Backend::Hex),
            other => Err(Error::Config(format!("unknown grid backend `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub backend: Backend,
    pub resolution: u8,
    pub index: u64,
}

impl CellKey {
    pub fn quad(resolution: u8, row: u64, col: u64) -> Self {
        CellKey {
            backend: Backend::Quad,
            resolution,
            index: (row << resolution) | col,
        }
    }

    /// `(row, col)` of a QUAD cell.
    pub fn quad_row_col(&self) -> (u64, u64) {
        let side_mask = (1u64 << self.resolution) - 1;
        (self.index >> self.resolution, self.index & side_mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    /// The Porto filtering box.
    pub const PORTO: BBox = BBox {
        lat_min: 41.100,
        lat_max: 41.220,
        lon_min: -8.700,
        lon_max: -8.530,
    };

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::Config(format!("degenerate bbox {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub backend: Backend,
    pub bbox: BBox,
    pub r_min: u8,
    pub r_max: u8,
}

impl GridConfig {
    pub fn quad(bbox: BBox, r_min: u8, r_max: u8) -> Self {
        GridConfig {
            backend: Backend::Quad,
            bbox,
            r_min,
            r_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.r_min > self.r_max {
            return Err(Error::Config(format!(
                "r_min {} > r_max {}",
                self.r_min, self.r_max
            )));
        }
        let max = match self.backend {
            Backend::Quad => QUAD_MAX_RESOLUTION,
            Backend::Hex => HEX_MAX_RESOLUTION,
        };
        if self.r_max > max {
            return Err(Error::ResolutionOutOfRange {
                resolution: self.r_max,
                min: 0,
                max,
            });
        }
        Ok(())
    }
}

/// Operations every hierarchical partition provides.
pub trait CellSystem {
    fn backend(&self) -> Backend;
    fn max_resolution(&self) -> u8;
    fn cell_of(&self, p: &GpsPoint, resolution: u8) -> Result<CellKey>;
    fn children(&self, c: &CellKey) -> Result<Vec<CellKey>>;
    fn parent(&self, c: &CellKey) -> Result<CellKey>;

    /// Strict ancestry: true iff walking parents up from `b` reaches `a`.
    fn is_ancestor(&self, a: &CellKey, b: &CellKey) -> bool {
        if a.backend != b.backend || a.resolution >= b.resolution {
            return false;
        }
        let mut cur = *b;
        while cur.resolution > a.resolution {
            match self.parent(&cur) {
                Ok(p) => cur = p,
                Err(_) => return false,
            }
        }
        cur == *a
    }

    /// Ancestor (or self) of `c` at resolution `r <= c.resolution`.
    fn ancestor_at(&self, c: &CellKey, r: u8) -> Result<CellKey> {
        let mut cur = *c;
        while cur.resolution > r {
            cur = self.parent(&cur)?;
        }
        Ok(cur)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadGrid {
    pub bbox: BBox,
}

impl QuadGrid {
    pub fn new(bbox: BBox) -> Result<Self> {
        bbox.validate()?;
        Ok(QuadGrid { bbox })
    }

    fn check_resolution(r: u8) -> Result<()> {
        if r > QUAD_MAX_RESOLUTION {
            return Err(Error::ResolutionOutOfRange {
                resolution: r,
                min: 0,
                max: QUAD_MAX_RESOLUTION,
            });
        }
        Ok(())
    }

    fn axis_index(v: f64, lo: f64, hi: f64, r: u8) -> u64 {
        let side = 1u64 << r;
        // Scaling by a power of two is exact, so floors nest across resolutions.
        let frac = (v - lo) / (hi - lo);
        let i = (frac * side as f64).floor();
        if i < 0.0 {
            0
        } else {
            (i as u64).min(side - 1)
        }
    }

    /// `(lat_lo, lat_hi, lon_lo, lon_hi)` of a cell.
    pub fn rectangle(&self, c: &CellKey) -> (f64, f64, f64, f64) {
        let side = (1u64 << c.resolution) as f64;
        let (row, col) = c.quad_row_col();
        let dlat = (self.bbox.lat_max - self.bbox.lat_min) / side;
        let dlon = (self.bbox.lon_max - self.bbox.lon_min) / side;
        (
            self.bbox.lat_min + row as f64 * dlat,
            self.bbox.lat_min + (row + 1) as f64 * dlat,
            self.bbox.lon_min + col as f64 * dlon,
            self.bbox.lon_min + (col + 1) as f64 * dlon,
        )
    }

    pub fn center(&self, c: &CellKey) -> (f64, f64) {
        let (a, b, x, y) = self.rectangle(c);
        ((a + b) / 2.0, (x + y) / 2.0)
    }
}

impl CellSystem for QuadGrid {
    fn backend(&self) -> Backend {
        Backend::Quad
    }

    fn max_resolution(&self) -> u8 {
        QUAD_MAX_RESOLUTION
    }

    fn cell_of(&self, p: &GpsPoint, resolution: u8) -> Result<CellKey> {
        Self::check_resolution(resolution)?;
        if !self.bbox.contains(p.lat, p.lon) {
            return Err(Error::OutOfDomain {
                lat: p.lat,
                lon: p.lon,
            });
        }
        let row = Self::axis_index(p.lat, self.bbox.lat_min, self.bbox.lat_max, resolution);
        let col = Self::axis_index(p.lon, self.bbox.lon_min, self.bbox.lon_max, resolution);
        Ok(CellKey::quad(resolution, row, col))
    }

    fn children(&self, c: &CellKey) -> Result<Vec<CellKey>> {
        if c.backend != Backend::Quad {
            return Err(Error::BackendMismatch(Backend::Quad, c.backend));
        }
        if c.resolution >= QUAD_MAX_RESOLUTION {
            return Err(Error::AtMaxResolution(c.resolution));
        }
        let (row, col) = c.quad_row_col();
        let r = c.resolution + 1;
        Ok(vec![
            CellKey::quad(r, 2 * row, 2 * col),
            CellKey::quad(r, 2 * row, 2 * col + 1),
            CellKey::quad(r, 2 * row + 1, 2 * col),
            CellKey::quad(r, 2 * row + 1, 2 * col + 1),
        ])
    }

    fn parent(&self, c: &CellKey) -> Result<CellKey> {
        if c.backend != Backend::Quad {
            return Err(Error::BackendMismatch(Backend::Quad, c.backend));
        }
        if c.resolution == 0 {
            return Err(Error::NoParent);
        }
        let (row, col) = c.quad_row_col();
        Ok(CellKey::quad(c.resolution - 1, row / 2, col / 2))
    }
}

#[cfg(feature = "hex")]
mod hex {
    use h3o::{CellIndex, LatLng, Resolution};

    use super::*;

    /// Adapter over the H3 hexagonal hierarchy.
    #[derive(Debug, Clone, Copy, Default, PartialEq)]
    pub struct HexGrid;

    fn res(r: u8) -> Result<Resolution> {
        Resolution::try_from(r).map_err(|_| Error::ResolutionOutOfRange {
            resolution: r,
            min: 0,
            max: HEX_MAX_RESOLUTION,
        })
    }

    fn cell(c: &CellKey) -> Result<CellIndex> {
        if c.backend != Backend::Hex {
            return Err(Error::BackendMismatch(Backend::Hex, c.backend));
        }
        CellIndex::try_from(c.index).map_err(|e| Error::Config(format!("bad H3 index: {e}")))
    }

    fn key(c: CellIndex) -> CellKey {
        CellKey {
            backend: Backend::Hex,
            resolution: u8::from(c.resolution()),
            index: u64::from(c),
        }
    }

    impl CellSystem for HexGrid {
        fn backend(&self) -> Backend {
            Backend::Hex
        }

        fn max_resolution(&self) -> u8 {
            HEX_MAX_RESOLUTION
        }

        fn cell_of(&self, p: &GpsPoint, resolution: u8) -> Result<CellKey> {
            let ll = LatLng::new(p.lat, p.lon).map_err(|e| Error::InvalidPoint(e.to_string()))?;
            Ok(key(ll.to_cell(res(resolution)?)))
        }

        fn children(&self, c: &CellKey) -> Result<Vec<CellKey>> {
            if c.resolution >= HEX_MAX_RESOLUTION {
                return Err(Error::AtMaxResolution(c.resolution));
            }
            let idx = cell(c)?;
            Ok(idx.children(res(c.resolution + 1)?).map(key).collect())
        }

        fn parent(&self, c: &CellKey) -> Result<CellKey> {
            if c.resolution == 0 {
                return Err(Error::NoParent);
            }
            let idx = cell(c)?;
            idx.parent(res(c.resolution - 1)?)
                .map(key)
                .ok_or(Error::NoParent)
        }
    }
}

#[cfg(feature = "hex")]
pub use hex::HexGrid;

/// Backend chosen at runtime from a [`GridConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Grid {
    Quad(QuadGrid),
    #[cfg(feature = "hex")]
    Hex(HexGrid),
}

impl Grid {
    pub fn from_config(cfg: &GridConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.backend {
            Backend::Quad => Ok(Grid::Quad(QuadGrid::new(cfg.bbox)?)),
            #[cfg(feature = "hex")]
            Backend::Hex => Ok(Grid::Hex(HexGrid)),
            #[cfg(not(feature = "hex"))]
            Backend::Hex => Err(Error::BackendUnavailable(Backend::Hex)),
        }
    }

    fn inner(&self) -> &dyn CellSystem {
        match self {
            Grid::Quad(q) => q,
            #[cfg(feature = "hex")]
            Grid::Hex(h) => h,
        }
    }
}

impl CellSystem for Grid {
    fn backend(&self) -> Backend {
        self.inner().backend()
    }
    fn max_resolution(&self) -> u8 {
        self.inner().max_resolution()
    }
    fn cell_of(&self, p: &GpsPoint, resolution: u8) -> Result<CellKey> {
        self.inner().cell_of(p, resolution)
    }
    fn children(&self, c: &CellKey) -> Result<Vec<CellKey>> {
        self.inner().children(c)
    }
    fn parent(&self, c: &CellKey) -> Result<CellKey> {
        self.inner().parent(c)
    }
}
