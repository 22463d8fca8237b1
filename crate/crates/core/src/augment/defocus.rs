//! Defocus blur with a binary disk kernel.

use super::AugmentError;
use crate::raster::{PadPolicy, Patch};

/// Square kernel of side `2·radius+1`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Tap at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        let r = self.radius as i64;
        self.taps[((dy + r) * self.side() as i64 + dx + r) as usize]
    }

    fn nonzero(&self) -> Vec<(i64, i64, f64)> {
        let r = self.radius as i64;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let w = self.at(dx, dy);
                if w != 0.0 {
                    out.push((dx, dy, w));
                }
            }
        }
        out
    }
}

/// Unit-sum disk: 1 where `dx² + dy² ≤ r²`, normalized.
pub fn disk_kernel(radius: u32) -> Result<Kernel, AugmentError> {
    if radius < 1 {
        return Err(AugmentError::BadRadius(radius));
    }
    let r = radius as i64;
    let side = (2 * r + 1) as usize;
    let mut taps = vec![0.0; side * side];
    let mut n = 0usize;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                taps[((dy + r) * side as i64 + dx + r) as usize] = 1.0;
                n += 1;
            }
        }
    }
    let w = 1.0 / n as f64;
    taps.iter_mut().for_each(|t| *t *= w);
    Ok(Kernel {
        radius: radius as usize,
        taps,
    })
}

/// Convolve each channel with `kernel`; results round half-up and clamp to u8.
pub fn convolve(patch: &Patch, kernel: &Kernel, pad: PadPolicy) -> Patch {
    let taps = kernel.nonzero();
    let (w, h) = (patch.width(), patch.height());
    let mut out = patch.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for &(dx, dy, k) in &taps {
                let px = patch.pixel_padded(x as i64 + dx, y as i64 + dy, pad);
                for c in 0..3 {
                    acc[c] += k * px[c] as f64;
                }
            }
            out.set_pixel(x, y, acc.map(quantize));
        }
    }
    out
}

pub fn defocus(patch: &Patch, radius: u32, pad: PadPolicy) -> Result<Patch, AugmentError> {
    let kernel = disk_kernel(radius)?;
    Ok(convolve(patch, &kernel, pad))
}

#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}
