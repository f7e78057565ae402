//! Quadkeys over a lon/lat bounding box.
//!
//! A quadkey is a base-4 digit string giving the path from the root cell.
//! Children are ordered NW, NE, SW, SE. Cells are half-open toward the
//! east and north, except that the box's own east and north edges belong
//! to the cells touching them, so every point of the box has exactly one
//! cell at every depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("invalid bounding box {0:?}")]
    InvalidBox(BoundingBox),
    #[error("invalid quadkey {0:?}")]
    InvalidQuadkey(String),
}

impl BoundingBox {
    /// Default coverage: greater Wuhan.
    pub const WUHAN: BoundingBox =
        BoundingBox { min_lon: 113.7, min_lat: 29.9, max_lon: 115.1, max_lat: 31.4 };

    pub fn new(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Result<Self, GridError> {
        let b = BoundingBox { min_lon, min_lat, max_lon, max_lat };
        let finite = [min_lon, min_lat, max_lon, max_lat].iter().all(|v| v.is_finite());
        if !finite || min_lon >= max_lon || min_lat >= max_lat {
            return Err(GridError::InvalidBox(b));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.max_lon - self.min_lon
    }

    pub fn height(&self) -> f64 {
        self.max_lat - self.min_lat
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint { lon: (self.min_lon + self.max_lon) / 2.0, lat: (self.min_lat + self.max_lat) / 2.0 }
    }

    /// Closed containment.
    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lon..=self.max_lon).contains(&p.lon) && (self.min_lat..=self.max_lat).contains(&p.lat)
    }

    /// True when the two closed rectangles share any point.
    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.min_lon <= other.max_lon
            && other.min_lon <= self.max_lon
            && self.min_lat <= other.max_lat
            && other.min_lat <= self.max_lat
    }

    fn mid(&self) -> (f64, f64) {
        ((self.min_lon + self.max_lon) / 2.0, (self.min_lat + self.max_lat) / 2.0)
    }

    /// Quadrant `digit` of this box.
    pub fn child(&self, digit: u8) -> BoundingBox {
        let (mx, my) = self.mid();
        let (west, north) = (digit.is_multiple_of(2), digit < 2);
        BoundingBox {
            min_lon: if west { self.min_lon } else { mx },
            max_lon: if west { mx } else { self.max_lon },
            min_lat: if north { my } else { self.min_lat },
            max_lat: if north { self.max_lat } else { my },
        }
    }

    /// Quadrant digit holding `p`; midpoints belong to the east/north side.
    pub fn child_digit(&self, p: GeoPoint) -> u8 {
        let (mx, my) = self.mid();
        let east = p.lon >= mx;
        let north = p.lat >= my;
        match (north, east) {
            (true, false) => 0,
            (true, true) => 1,
            (false, false) => 2,
            (false, true) => 3,
        }
    }
}

impl Default for BoundingBox {
    fn default() -> Self {
        BoundingBox::WUHAN
    }
}

/// Base-4 cell path from the root. The root is the empty string.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Quadkey(String);

impl Quadkey {
    pub fn root() -> Self {
        Quadkey(String::new())
    }

    /// Cell at `depth` containing `p`. The caller checks `bbox.contains(p)`.
    pub fn for_point(bbox: &BoundingBox, p: GeoPoint, depth: u8) -> Quadkey {
        let mut cell = *bbox;
        let mut key = String::with_capacity(depth as usize);
        for _ in 0..depth {
            let d = cell.child_digit(p);
            key.push(char::from(b'0' + d));
            cell = cell.child(d);
        }
        Quadkey(key)
    }

    /// Cell at `depth` in lattice coordinates; column 0 is west, row 0 is south.
    pub fn from_col_row(col: u32, row: u32, depth: u8) -> Quadkey {
        let mut key = String::with_capacity(depth as usize);
        for level in (0..depth).rev() {
            let east = (col >> level) & 1 == 1;
            let north = (row >> level) & 1 == 1;
            let d = match (north, east) {
                (true, false) => 0,
                (true, true) => 1,
                (false, false) => 2,
                (false, true) => 3,
            };
            key.push(char::from(b'0' + d));
        }
        Quadkey(key)
    }

    /// Lattice coordinates at this key's own depth.
    pub fn col_row(&self) -> (u32, u32) {
        let (mut col, mut row) = (0u32, 0u32);
        for d in self.digits() {
            col = (col << 1) | u32::from(d % 2 == 1);
            row = (row << 1) | u32::from(d < 2);
        }
        (col, row)
    }

    pub fn depth(&self) -> u8 {
        self.0.len() as u8
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn digits(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.bytes().map(|b| b - b'0')
    }

    pub fn child(&self, digit: u8) -> Quadkey {
        debug_assert!(digit < 4);
        let mut s = self.0.clone();
        s.push(char::from(b'0' + digit));
        Quadkey(s)
    }

    pub fn children(&self) -> [Quadkey; 4] {
        [self.child(0), self.child(1), self.child(2), self.child(3)]
    }

    pub fn parent(&self) -> Option<Quadkey> {
        (!self.0.is_empty()).then(|| Quadkey(self.0[..self.0.len() - 1].to_string()))
    }

    /// Truncates to `depth` (no-op if already shallower).
    pub fn ancestor(&self, depth: u8) -> Quadkey {
        Quadkey(self.0[..(depth as usize).min(self.0.len())].to_string())
    }

    /// True if `self` is `other` or one of its ancestors.
    pub fn is_prefix_of(&self, other: &Quadkey) -> bool {
        other.0.starts_with(&self.0)
    }

    pub fn bounds(&self, bbox: &BoundingBox) -> BoundingBox {
        self.digits().fold(*bbox, |cell, d| cell.child(d))
    }

    pub fn center(&self, bbox: &BoundingBox) -> GeoPoint {
        self.bounds(bbox).center()
    }
}

impl fmt::Display for Quadkey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            f.write_str("(root)")
        } else {
            f.write_str(&self.0)
        }
    }
}

impl FromStr for Quadkey {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() > u8::MAX as usize || !s.bytes().all(|b| (b'0'..=b'3').contains(&b)) {
            return Err(GridError::InvalidQuadkey(s.to_string()));
        }
        Ok(Quadkey(s.to_string()))
    }
}

impl TryFrom<String> for Quadkey {
    type Error = GridError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Quadkey> for String {
    fn from(q: Quadkey) -> String {
        q.0
    }
}
