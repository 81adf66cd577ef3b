//! Line segments in normalized image coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A segment between `(x1, y1)` and `(x2, y2)`, coordinates as fractions of image width/height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl LineSegment {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a segment with every coordinate clamped into `[0, 1]`.
    pub fn clamped(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, x2, y2).clamp_unit()
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn clamp_unit(self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        Self::new(c(self.x1), c(self.y1), c(self.x2), c(self.y2))
    }

    pub fn midpoint(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn length(&self) -> f64 {
        (self.x2 - self.x1).hypot(self.y2 - self.y1)
    }

    pub fn swapped(self) -> Self {
        Self::new(self.x2, self.y2, self.x1, self.y1)
    }

    /// Orders the endpoints lexicographically by `(x, y)`.
    pub fn canonicalize(self) -> Self {
        let first = (self.x1, self.y1);
        let second = (self.x2, self.y2);
        if second.0 < first.0 || (second.0 == first.0 && second.1 < first.1) {
            self.swapped()
        } else {
            self
        }
    }

    pub fn is_canonical(&self) -> bool {
        *self == self.canonicalize()
    }

    pub fn in_unit_square(&self) -> bool {
        self.to_array().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Rotates both endpoints by `theta` radians (counter-clockwise in `(x, y)`) about the midpoint.
    pub fn rotate_about_midpoint(self, theta: f64) -> Self {
        let (mx, my) = self.midpoint();
        let (s, c) = theta.sin_cos();
        let rot = |x: f64, y: f64| {
            let (dx, dy) = (x - mx, y - my);
            (mx + dx * c - dy * s, my + dx * s + dy * c)
        };
        let (x1, y1) = rot(self.x1, self.y1);
        let (x2, y2) = rot(self.x2, self.y2);
        Self::new(x1, y1, x2, y2)
    }

    /// Scales the segment length by `factor` keeping the midpoint fixed.
    pub fn scale_about_midpoint(self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) {
            return Err(Error::arg(format!("scale factor must be non-negative, got {factor}")));
        }
        let (mx, my) = self.midpoint();
        let s = |v: f64, m: f64| m + (v - m) * factor;
        Ok(Self::new(
            s(self.x1, mx),
            s(self.y1, my),
            s(self.x2, mx),
            s(self.y2, my),
        ))
    }
}

/// Smallest summed squared endpoint distance over both endpoint pairings, after
/// mapping both segments onto a `scale × scale` pixel grid.
pub fn min_sq_endpoint_dist(a: &LineSegment, b: &LineSegment, scale: f64) -> f64 {
    let sq = |x1: f64, y1: f64, x2: f64, y2: f64| {
        let dx = (x1 - x2) * scale;
        let dy = (y1 - y2) * scale;
        dx * dx + dy * dy
    };
    let straight = sq(a.x1, a.y1, b.x1, b.y1) + sq(a.x2, a.y2, b.x2, b.y2);
    let crossed = sq(a.x1, a.y1, b.x2, b.y2) + sq(a.x2, a.y2, b.x1, b.y1);
    straight.min(crossed)
}
