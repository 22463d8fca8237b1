//! Patch augmentation: D4 symmetries, defocus blur, stain randomization
//! and color jitter, plus the combined detector-training pipeline.

pub mod d4;
pub mod defocus;
pub mod jitter;
pub mod lab;
pub mod stain;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use d4::{d4_apply, d4_apply_point, D4Element};
pub use defocus::{defocus, disk_kernel, Kernel};
pub use jitter::{apply_jitter, color_jitter, sample_jitter, ColorJitterParams, JitterDraw};
pub use lab::{lab_to_rgb, rgb_to_lab, LabRaster};
pub use stain::{
    fit_stain_profile, reinhard_transfer, sample_stain_template, NormalSource, StainProfile, TemplateStats,
};

use crate::raster::{PadPolicy, Patch};
use crate::rng::PipelineRng;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("D4 transforms need a square patch, got {width}x{height}")]
    NotSquare { width: usize, height: usize },
    #[error("disk radius must be >= 1, got {0}")]
    BadRadius(u32),
    #[error("std_hyper must be > -1, got {0}")]
    BadStdHyper(f64),
    #[error("cannot fit a stain profile from zero images")]
    EmptyProfileInput,
    #[error("{name} must lie in [0, 1], got {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("stain augmentation is enabled but no stain profile was supplied")]
    MissingProfile,
    #[error("defocus radius range [{0}, {1}] is empty or below 1")]
    BadRadiusRange(u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Apply a uniformly drawn D4 element to every patch.
    #[serde(default = "yes")]
    pub d4: bool,
    #[serde(default = "default_p")]
    pub defocus_p: f64,
    /// Inclusive radius range, drawn uniformly.
    #[serde(default = "default_radii")]
    pub defocus_radius: [u32; 2],
    #[serde(default = "default_p")]
    pub stain_p: f64,
    #[serde(default = "default_std_hyper")]
    pub std_hyper: f64,
}

fn yes() -> bool {
    true
}
fn default_p() -> f64 {
    0.3
}
fn default_radii() -> [u32; 2] {
    [1, 3]
}
fn default_std_hyper() -> f64 {
    stain::DEFAULT_STD_HYPER
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            d4: true,
            defocus_p: default_p(),
            defocus_radius: default_radii(),
            stain_p: default_p(),
            std_hyper: default_std_hyper(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, value) in [("defocus_p", self.defocus_p), ("stain_p", self.stain_p)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AugmentError::OutOfRange { name, value });
            }
        }
        let [lo, hi] = self.defocus_radius;
        if lo < 1 || lo > hi {
            return Err(AugmentError::BadRadiusRange(lo, hi));
        }
        if !(self.std_hyper > -1.0) {
            return Err(AugmentError::BadStdHyper(self.std_hyper));
        }
        Ok(())
    }
}

/// What [`augment_pipeline`] actually did to a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedAugment {
    pub d4: D4Element,
    pub defocus_radius: Option<u32>,
    pub stain: Option<TemplateStats>,
}

/// D4 (always, when enabled), then defocus and stain transfer each with
/// their own probability. Every coin is drawn whether or not its
/// probability is zero, so the stream layout does not depend on the config.
pub fn augment_pipeline(
    patch: &Patch,
    cfg: &AugmentConfig,
    profile: Option<&StainProfile>,
    rng: &mut PipelineRng,
) -> Result<(Patch, AppliedAugment), AugmentError> {
    cfg.validate()?;
    if cfg.stain_p > 0.0 && profile.is_none() {
        return Err(AugmentError::MissingProfile);
    }

    let g_index = rng.random_range(0..8usize);
    let g = if cfg.d4 {
        D4Element::from_index(g_index)
    } else {
        D4Element::IDENTITY
    };
    let mut out = d4_apply(patch, g)?;

    let defocus_coin = rng.random::<f64>();
    let defocus_radius = if defocus_coin < cfg.defocus_p {
        let [lo, hi] = cfg.defocus_radius;
        let r = rng.random_range(lo..=hi);
        out = defocus(&out, r, PadPolicy::Reflect)?;
        Some(r)
    } else {
        None
    };

    let stain_coin = rng.random::<f64>();
    let stain = match profile {
        Some(profile) if stain_coin < cfg.stain_p => {
            let t = sample_stain_template(profile, cfg.std_hyper, rng)?;
            out = reinhard_transfer(&out, &t);
            Some(t)
        }
        _ => None,
    };

    Ok((
        out,
        AppliedAugment {
            d4: g,
            defocus_radius,
            stain,
        },
    ))
}
