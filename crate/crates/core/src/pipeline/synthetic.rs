//! Desk-scale synthetic slides with planted figures and matching manifests.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};
use crate::ingest::{Annotation, DatasetManifest, ImageRecord, Label, DEFAULT_MICRONS_PER_PIXEL};
use crate::raster::Raster;
use crate::rng::seeded;

pub const SYNTHETIC_IMAGE_ID: &str = "synthetic";
pub const SYNTHETIC_IMAGE_FILE: &str = "synthetic.png";
/// Planted centers are at least this far apart.
pub const MIN_SPACING: f64 = 130.0;
/// Planted centers keep this distance from every border.
pub const BORDER_MARGIN: usize = 100;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 20_000;

const BACKGROUND: [u8; 3] = [180, 118, 122];
const NOISE: i32 = 3;

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("could not place figure {index} after {attempts} attempts; enlarge the slide or plant fewer figures")]
    PlacementCap { index: usize, attempts: usize },
    #[error("slide {width}x{height} leaves no room inside the {margin}-px border margin")]
    TooSmall { width: usize, height: usize, margin: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Large dark ellipses among small mid-gray imposters.
    #[default]
    Standard,
    /// Equal-sized figures where imposters are only slightly lighter than
    /// mitoses and the tone varies per figure.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub n_mitoses: usize,
    pub n_imposters: usize,
    pub seed: u64,
    #[serde(default)]
    pub preset: Preset,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            n_mitoses: 10,
            n_imposters: 5,
            seed: 7,
            preset: Preset::Standard,
        }
    }
}

impl SyntheticSpec {
    /// The slide used for filter-monotonicity checks.
    pub fn adversarial(seed: u64) -> Self {
        Self {
            width: 2048,
            height: 2048,
            n_mitoses: 20,
            n_imposters: 60,
            seed,
            preset: Preset::Adversarial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Figure {
    cx: usize,
    cy: usize,
    a: f64,
    b: f64,
    rgb: [u8; 3],
    label: Label,
}

impl Figure {
    fn covers(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 - self.cx as f64) / self.a;
        let dy = (y as f64 - self.cy as f64) / self.b;
        dx * dx + dy * dy <= 1.0
    }

    /// The pixel set is symmetric about pixel `(cx, cy)`, so its pixel-center
    /// centroid is exactly this point.
    fn center(&self) -> Point {
        Point::new(self.cx as f64 + 0.5, self.cy as f64 + 0.5)
    }
}

fn draw_figure(rng: &mut impl Rng, preset: Preset, label: Label, cx: usize, cy: usize) -> Figure {
    let (a, b, rgb) = match (preset, label) {
        (Preset::Standard, Label::Mitotic) => (
            rng.random_range(28.0..=31.0),
            rng.random_range(28.0..=31.0),
            [15, 0, 25],
        ),
        (Preset::Standard, Label::Imposter) => {
            let r = rng.random_range(12.0..=15.0);
            (r, r, [100, 96, 108])
        }
        (Preset::Adversarial, label) => {
            let v: u8 = match label {
                Label::Mitotic => rng.random_range(4..=18),
                Label::Imposter => rng.random_range(46..=86),
            };
            (
                rng.random_range(24.0..=28.0),
                rng.random_range(24.0..=28.0),
                [v + 4, v, v + 8],
            )
        }
    };
    Figure {
        cx,
        cy,
        a,
        b,
        rgb,
        label,
    }
}

/// Render a slide and its manifest. Mitoses are planted first, then
/// imposters, each at a uniformly drawn integer center at least
/// [`MIN_SPACING`] from every earlier one.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Raster, DatasetManifest), SyntheticError> {
    let (w, h) = (spec.width, spec.height);
    if w <= 2 * BORDER_MARGIN || h <= 2 * BORDER_MARGIN {
        return Err(SyntheticError::TooSmall {
            width: w,
            height: h,
            margin: BORDER_MARGIN,
        });
    }
    let mut rng = seeded(spec.seed);
    let labels = std::iter::repeat_n(Label::Mitotic, spec.n_mitoses)
        .chain(std::iter::repeat_n(Label::Imposter, spec.n_imposters));
    let mut figures: Vec<Figure> = Vec::new();
    for (index, label) in labels.enumerate() {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cx = rng.random_range(BORDER_MARGIN..w - BORDER_MARGIN);
            let cy = rng.random_range(BORDER_MARGIN..h - BORDER_MARGIN);
            let p = Point::new(cx as f64, cy as f64);
            if figures
                .iter()
                .all(|f| Point::new(f.cx as f64, f.cy as f64).distance(&p) >= MIN_SPACING)
            {
                figures.push(draw_figure(&mut rng, spec.preset, label, cx, cy));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SyntheticError::PlacementCap {
                index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    let mut raster = Raster::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = BACKGROUND.map(|c| (c as i32 + rng.random_range(-NOISE..=NOISE)) as u8);
            raster.set_pixel(x, y, px);
        }
    }
    for f in &figures {
        let (ra, rb) = (f.a.ceil() as usize, f.b.ceil() as usize);
        for y in f.cy - rb..=f.cy + rb {
            for x in f.cx - ra..=f.cx + ra {
                if f.covers(x, y) {
                    raster.set_pixel(x, y, f.rgb);
                }
            }
        }
    }

    let annotations = figures
        .iter()
        .map(|f| {
            let c = f.center();
            Annotation {
                image_id: SYNTHETIC_IMAGE_ID.to_string(),
                center: c,
                bbox: Some(BBox::new(c.x - f.a, c.y - f.b, c.x + f.a, c.y + f.b)),
                label: f.label,
            }
        })
        .collect();
    let manifest = DatasetManifest {
        name: format!("synthetic-seed{}", spec.seed),
        images: vec![ImageRecord {
            id: SYNTHETIC_IMAGE_ID.to_string(),
            path: SYNTHETIC_IMAGE_FILE.to_string(),
            width: w as u32,
            height: h as u32,
            microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        }],
        annotations,
    };
    Ok((raster, manifest))
}
