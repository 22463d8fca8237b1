//! The dihedral group of the square acting on square patches.

use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::geometry::Point;
use crate::raster::Patch;

/// Rotate counter-clockwise by `rotation` quarter turns, then mirror
/// horizontally if `mirrored`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct D4Element {
    rotation: u8,
    mirrored: bool,
}

impl Default for D4Element {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl D4Element {
    pub const IDENTITY: Self = Self {
        rotation: 0,
        mirrored: false,
    };

    pub const fn new(rotation: u8, mirrored: bool) -> Self {
        Self {
            rotation: rotation % 4,
            mirrored,
        }
    }

    pub fn rotation(self) -> u8 {
        self.rotation
    }

    pub fn mirrored(self) -> bool {
        self.mirrored
    }

    pub fn all() -> [Self; 8] {
        std::array::from_fn(Self::from_index)
    }

    /// `0..8`: rotations 0-3 unmirrored, then 0-3 mirrored.
    pub fn from_index(i: usize) -> Self {
        Self::new((i % 4) as u8, i >= 4)
    }

    pub fn index(self) -> usize {
        self.rotation as usize + if self.mirrored { 4 } else { 0 }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Self) -> Self {
        // M^a R^r M^b R^s = M^(a^b) R^(±r + s), with R M = M R^-1
        let r = if other.mirrored {
            (4 - self.rotation) % 4
        } else {
            self.rotation
        };
        Self::new(r + other.rotation, self.mirrored ^ other.mirrored)
    }

    pub fn inverse(self) -> Self {
        if self.mirrored {
            self
        } else {
            Self::new((4 - self.rotation) % 4, false)
        }
    }

    /// Pixel-index action on a `size`×`size` grid.
    pub fn apply_point(self, x: i64, y: i64, size: usize) -> (i64, i64) {
        let last = size as i64 - 1;
        let (mut x, mut y) = (x, y);
        for _ in 0..self.rotation {
            (x, y) = (y, last - x);
        }
        if self.mirrored {
            x = last - x;
        }
        (x, y)
    }

    /// Continuous-coordinate action (pixel `i` spans `[i, i+1)`), for
    /// carrying annotation centers through a transform.
    pub fn apply_continuous(self, p: Point, size: f64) -> Point {
        let (mut x, mut y) = (p.x, p.y);
        for _ in 0..self.rotation {
            (x, y) = (y, size - x);
        }
        if self.mirrored {
            x = size - x;
        }
        Point::new(x, y)
    }
}

/// Transform a square patch: `out[g(p)] = in[p]` for every pixel `p`.
pub fn d4_apply(patch: &Patch, g: D4Element) -> Result<Patch, AugmentError> {
    if !patch.is_square() {
        return Err(AugmentError::NotSquare {
            width: patch.width(),
            height: patch.height(),
        });
    }
    if g == D4Element::IDENTITY {
        return Ok(patch.clone());
    }
    let size = patch.width();
    let mut out = patch.clone();
    for y in 0..size {
        for x in 0..size {
            let (tx, ty) = g.apply_point(x as i64, y as i64, size);
            out.set_pixel(tx as usize, ty as usize, patch.pixel(x, y));
        }
    }
    Ok(out)
}

pub fn d4_apply_point(p: (i64, i64), g: D4Element, size: usize) -> (i64, i64) {
    g.apply_point(p.0, p.1, size)
}
