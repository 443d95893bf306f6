//! Half-open pixel intervals and rectangles.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open interval `[start, end)` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub const fn new(start: usize, end: usize) -> Self {
        Interval { start, end }
    }

    pub const fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.start.min(other.start), self.end.max(other.end))
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        let start = self.start.max(other.start);
        Interval::new(start, self.end.min(other.end).max(start))
    }
}

/// Rectangle `[y0, y1) x [x0, x1)`; serialized as `[y0, x0, y1, x1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 4]", try_from = "[usize; 4]")]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Region {
    pub const fn new(y0: usize, x0: usize, y1: usize, x1: usize) -> Self {
        Region { y0, x0, y1, x1 }
    }

    /// The whole `h x w` map.
    pub const fn full(h: usize, w: usize) -> Self {
        Region::new(0, 0, h, w)
    }

    pub const fn square(start: usize, end: usize) -> Self {
        Region::new(start, start, end, end)
    }

    pub fn from_axes(rows: Interval, cols: Interval) -> Self {
        Region::new(rows.start, cols.start, rows.end, cols.end)
    }

    pub const fn rows(&self) -> Interval {
        Interval::new(self.y0, self.y1)
    }

    pub const fn cols(&self) -> Interval {
        Interval::new(self.x0, self.x1)
    }

    pub const fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub const fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub const fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub const fn is_empty(&self) -> bool {
        self.y1 <= self.y0 || self.x1 <= self.x0
    }

    pub fn contains(&self, other: &Region) -> bool {
        self.rows().contains(&other.rows()) && self.cols().contains(&other.cols())
    }

    pub fn contains_point(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    pub fn intersect(&self, other: &Region) -> Region {
        Region::from_axes(
            self.rows().intersect(&other.rows()),
            self.cols().intersect(&other.cols()),
        )
    }

    pub fn hull(&self, other: &Region) -> Region {
        Region::from_axes(self.rows().hull(&other.rows()), self.cols().hull(&other.cols()))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})x[{},{})", self.y0, self.y1, self.x0, self.x1)
    }
}

impl From<Region> for [usize; 4] {
    fn from(r: Region) -> Self {
        [r.y0, r.x0, r.y1, r.x1]
    }
}

impl TryFrom<[usize; 4]> for Region {
    type Error = Error;

    fn try_from([y0, x0, y1, x1]: [usize; 4]) -> Result<Self> {
        let r = Region::new(y0, x0, y1, x1);
        if r.is_empty() {
            return Err(Error::Format(format!("empty region {r}")));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_json_is_flat_array() {
        let r = Region::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&r).unwrap(), "[1,2,3,4]");
        let back: Region = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, r);
        assert!(serde_json::from_str::<Region>("[3,0,3,4]").is_err());
    }

    #[test]
    fn hull_and_intersection() {
        let a = Region::square(0, 3);
        let b = Region::square(2, 5);
        assert_eq!(a.hull(&b), Region::square(0, 5));
        assert_eq!(a.intersect(&b), Region::square(2, 3));
        assert!(a.intersect(&Region::square(4, 6)).is_empty());
    }
}
