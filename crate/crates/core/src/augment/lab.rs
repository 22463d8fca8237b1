//! sRGB ↔ CIE L*a*b* (D65 white, sRGB companding).

use crate::raster::Raster;

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_mul(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let xyz = mat_mul(&RGB_TO_XYZ, lin);
    let [fx, fy, fz] = std::array::from_fn(|i| f(xyz[i] / WHITE[i]));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Out-of-gamut colors clamp in linear RGB before quantization.
pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [WHITE[0] * f_inv(fx), WHITE[1] * f_inv(fy), WHITE[2] * f_inv(fz)];
    let lin = mat_mul(&XYZ_TO_RGB, xyz);
    lin.map(|c| {
        let s = linear_to_srgb(c.clamp(0.0, 1.0));
        (s * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
    })
}

/// Per-pixel L*a*b* values, same layout as the source raster.
#[derive(Debug, Clone, PartialEq)]
pub struct LabRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl LabRaster {
    pub fn from_rgb(r: &Raster) -> Self {
        Self {
            width: r.width(),
            height: r.height(),
            data: r.pixels().map(rgb_to_lab).collect(),
        }
    }

    pub fn to_rgb(&self) -> Raster {
        let bytes = self.data.iter().flat_map(|&lab| lab_to_rgb(lab)).collect();
        Raster::from_vec(self.width, self.height, bytes).expect("dimensions carried over")
    }

    /// Per-channel pixel mean and population standard deviation.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.data.len().max(1) as f64;
        let mut mean = [0.0; 3];
        for px in &self.data {
            for c in 0..3 {
                mean[c] += px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 3];
        for px in &self.data {
            for c in 0..3 {
                let d = px[c] - mean[c];
                var[c] += d * d;
            }
        }
        (mean, var.map(|v| (v / n).sqrt()))
    }
}

pub fn raster_to_lab(r: &Raster) -> LabRaster {
    LabRaster::from_rgb(r)
}

pub fn lab_to_raster(l: &LabRaster) -> Raster {
    l.to_rgb()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = rgb_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-3, "{w:?}");
        assert!(w[1].abs() <= 0.01 && w[2].abs() <= 0.01, "{w:?}");
        let b = rgb_to_lab([0, 0, 0]);
        assert!(b[0].abs() < 1e-9);
    }

    #[test]
    fn known_primary() {
        // sRGB red is L*=53.24, a*=80.09, b*=67.20 in the usual tables
        let r = rgb_to_lab([255, 0, 0]);
        assert!((r[0] - 53.24).abs() < 0.01 && (r[1] - 80.09).abs() < 0.02 && (r[2] - 67.20).abs() < 0.02);
    }

    #[test]
    fn round_trip_every_gray() {
        for v in 0..=255u8 {
            assert_eq!(lab_to_rgb(rgb_to_lab([v, v, v])), [v, v, v]);
        }
    }

    #[test]
    fn out_of_gamut_clamps() {
        assert_eq!(lab_to_rgb([150.0, 0.0, 0.0]), [255, 255, 255]);
        assert_eq!(lab_to_rgb([-20.0, 0.0, 0.0]), [0, 0, 0]);
    }
}
