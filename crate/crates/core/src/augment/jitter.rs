//! Classifier-side color jitter: brightness, contrast, saturation, hue,
//! random grayscale and random Gaussian blur, always in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::defocus::quantize;
use super::AugmentError;
use crate::raster::{luma, reflect_index, Patch, Raster};
use crate::rng::PipelineRng;

pub const BLUR_KERNEL_SIZE: usize = 5;
pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 2.0);

/// Maximum deviations (factors drawn from `[1−d, 1+d]`, hue shift from
/// `[−d, d]` of the hue circle) and the grayscale / blur probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
}

impl Default for ColorJitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.05,
            hue: 0.03,
            grayscale_p: 0.05,
            blur_p: 0.05,
        }
    }
}

impl ColorJitterParams {
    pub const NONE: Self = Self {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
        grayscale_p: 0.0,
        blur_p: 0.0,
    };

    pub fn validate(&self) -> Result<(), AugmentError> {
        let fields = [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ];
        for (name, v) in fields {
            if !(0.0..=1.0).contains(&v) {
                return Err(AugmentError::OutOfRange { name, value: v });
            }
        }
        Ok(())
    }
}

/// One concrete set of jitter factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterDraw {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_shift: f64,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
}

impl JitterDraw {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_shift: 0.0,
        grayscale: false,
        blur_sigma: None,
    };
}

pub fn sample_jitter(params: &ColorJitterParams, rng: &mut PipelineRng) -> Result<JitterDraw, AugmentError> {
    params.validate()?;
    let factor = |d: f64, rng: &mut PipelineRng| rng.random_range(1.0 - d..=1.0 + d);
    let brightness = factor(params.brightness, rng);
    let contrast = factor(params.contrast, rng);
    let saturation = factor(params.saturation, rng);
    let hue_shift = rng.random_range(-params.hue..=params.hue);
    let grayscale = rng.random::<f64>() < params.grayscale_p;
    let blur = rng.random::<f64>() < params.blur_p;
    let blur_sigma = blur.then(|| rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1));
    Ok(JitterDraw {
        brightness,
        contrast,
        saturation,
        hue_shift,
        grayscale,
        blur_sigma,
    })
}

pub fn color_jitter(patch: &Patch, params: &ColorJitterParams, rng: &mut PipelineRng) -> Result<Patch, AugmentError> {
    let draw = sample_jitter(params, rng)?;
    Ok(apply_jitter(patch, &draw))
}

type Buf = Vec<[f64; 3]>;

fn gray(px: [f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn clamp_px(px: [f64; 3]) -> [f64; 3] {
    px.map(|v| v.clamp(0.0, 255.0))
}

/// Apply a fixed draw. Identity factors are skipped outright so a no-op draw
/// returns the input bytes unchanged.
pub fn apply_jitter(patch: &Patch, draw: &JitterDraw) -> Patch {
    let mut buf: Buf = patch.pixels().map(|p| p.map(|v| v as f64)).collect();

    if draw.brightness != 1.0 {
        for px in &mut buf {
            *px = clamp_px(px.map(|v| v * draw.brightness));
        }
    }
    if draw.contrast != 1.0 {
        let mean = buf.iter().map(|&p| gray(p)).sum::<f64>() / buf.len().max(1) as f64;
        for px in &mut buf {
            *px = clamp_px(px.map(|v| mean + draw.contrast * (v - mean)));
        }
    }
    if draw.saturation != 1.0 {
        for px in &mut buf {
            let g = gray(*px);
            *px = clamp_px(px.map(|v| g + draw.saturation * (v - g)));
        }
    }
    if draw.hue_shift != 0.0 {
        for px in &mut buf {
            let [h, s, v] = rgb_to_hsv(*px);
            *px = hsv_to_rgb([(h + draw.hue_shift).rem_euclid(1.0), s, v]);
        }
    }
    if draw.grayscale {
        for px in &mut buf {
            let g = gray(*px);
            *px = [g, g, g];
        }
    }
    if let Some(sigma) = draw.blur_sigma {
        buf = gaussian_blur(&buf, patch.width(), patch.height(), sigma);
    }

    let bytes = buf.iter().flat_map(|px| px.map(quantize)).collect();
    Raster::from_vec(patch.width(), patch.height(), bytes).expect("same dimensions")
}

/// Convert to grayscale (BT.601 luma on every channel).
pub fn grayscale(patch: &Patch) -> Patch {
    let bytes = patch.pixels().flat_map(|p| [quantize(luma(p)); 3]).collect();
    Raster::from_vec(patch.width(), patch.height(), bytes).expect("same dimensions")
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gaussian_blur(buf: &Buf, width: usize, height: usize, sigma: f64) -> Buf {
    let r = (BLUR_KERNEL_SIZE / 2) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= sum);

    let mut tmp = vec![[0.0; 3]; buf.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for (i, w) in k.iter().enumerate() {
                let sx = reflect_index(x as i64 + i as i64 - r, width);
                let px = buf[y * width + sx];
                for c in 0..3 {
                    acc[c] += w * px[c];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![[0.0; 3]; buf.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; 3];
            for (i, w) in k.iter().enumerate() {
                let sy = reflect_index(y as i64 + i as i64 - r, height);
                let px = tmp[sy * width + x];
                for c in 0..3 {
                    acc[c] += w * px[c];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn noisy(seed: u64) -> Raster {
        let mut rng = seeded(seed);
        let bytes = (0..16 * 16 * 3).map(|_| rng.random::<u8>()).collect();
        Raster::from_vec(16, 16, bytes).unwrap()
    }

    #[test]
    fn zero_params_are_identity() {
        let p = noisy(1);
        let mut rng = seeded(5);
        assert_eq!(color_jitter(&p, &ColorJitterParams::NONE, &mut rng).unwrap(), p);
    }

    #[test]
    fn brightness_factor() {
        let p = Raster::filled(4, 4, [100, 100, 100]);
        let draw = JitterDraw {
            brightness: 1.1,
            ..JitterDraw::IDENTITY
        };
        assert!(apply_jitter(&p, &draw).pixels().all(|px| px == [110, 110, 110]));
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let draw = JitterDraw {
            grayscale: true,
            ..JitterDraw::IDENTITY
        };
        let out = apply_jitter(&noisy(2), &draw);
        assert!(out.pixels().all(|[r, g, b]| r == g && g == b));
        assert_eq!(grayscale(&Raster::filled(1, 1, [255, 0, 0])).pixel(0, 0), [76, 76, 76]);
    }

    #[test]
    fn hue_round_trip_is_lossless_for_zero_shift() {
        for px in [[10.0, 200.0, 30.0], [255.0, 0.0, 128.0], [40.0, 40.0, 40.0]] {
            let back = hsv_to_rgb(rgb_to_hsv(px));
            for c in 0..3 {
                assert!((back[c] - px[c]).abs() < 1e-9);
            }
        }
        // a full turn is the identity
        let draw = JitterDraw {
            hue_shift: 1.0,
            ..JitterDraw::IDENTITY
        };
        assert_eq!(apply_jitter(&noisy(3), &draw), noisy(3));
    }

    #[test]
    fn draws_stay_in_range_and_are_seeded() {
        let params = ColorJitterParams::default();
        for seed in 0..200 {
            let d = sample_jitter(&params, &mut seeded(seed)).unwrap();
            assert!((0.9..=1.1).contains(&d.brightness));
            assert!((0.9..=1.1).contains(&d.contrast));
            assert!((0.95..=1.05).contains(&d.saturation));
            assert!((-0.03..=0.03).contains(&d.hue_shift));
            assert_eq!(d, sample_jitter(&params, &mut seeded(seed)).unwrap());
        }
        let bad = ColorJitterParams { hue: 1.5, ..params };
        assert!(sample_jitter(&bad, &mut seeded(0)).is_err());
    }

    #[test]
    fn blur_preserves_constant() {
        let p = Raster::filled(8, 8, [90, 30, 200]);
        let draw = JitterDraw {
            blur_sigma: Some(1.7),
            ..JitterDraw::IDENTITY
        };
        assert_eq!(apply_jitter(&p, &draw), p);
    }
}
