//! Axis-aligned boxes in normalized image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangle in normalized image coordinates: `(x0, y0)` top-left,
/// `(x1, y1)` bottom-right, all in `[0, 1]` with strictly positive extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= 1.0
            && self.y1 <= 1.0
            && self.x0 < self.x1
            && self.y0 < self.y1;
        if !ok {
            return Err(Error::invalid(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Intersection area with another box (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    /// As the `[x0, y0, x1, y1]` array used by the JSON candidate files.
    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        BBox::new(a[0], a[1], a[2], a[3])
    }

    /// True when every edge matches within `eps`.
    pub fn approx_eq(&self, other: &BBox, eps: f64) -> bool {
        (self.x0 - other.x0).abs() <= eps
            && (self.y0 - other.y0).abs() <= eps
            && (self.x1 - other.x1).abs() <= eps
            && (self.y1 - other.y1).abs() <= eps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_and_out_of_range() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.5, 0.5).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
    }

    #[test]
    fn geometry_helpers() {
        let b = BBox::new(0.25, 0.25, 0.75, 1.0).unwrap();
        assert_eq!(b.width(), 0.5);
        assert_eq!(b.height(), 0.75);
        assert!((b.area() - 0.375).abs() < 1e-15);
        assert_eq!(b.center(), (0.5, 0.625));
    }

    #[test]
    fn intersection_of_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 0.4, 0.4).unwrap();
        let b = BBox::new(0.6, 0.6, 1.0, 1.0).unwrap();
        assert_eq!(a.intersection_area(&b), 0.0);
    }
}
