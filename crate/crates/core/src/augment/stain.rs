//! Stain-style randomization: fit per-channel LAB statistics over a
//! reference set, draw a template from them, and move a patch onto the
//! template with Reinhard mean/std transfer.

use serde::{Deserialize, Serialize};

use super::lab::LabRaster;
use super::AugmentError;
use crate::raster::{Patch, Raster};
use crate::rng::PipelineRng;

/// Lower bound for every standard deviation used as a divisor or target.
pub const STD_EPS: f64 = 1e-6;

/// Default template-sampling spread multiplier offset (`σ·(1 + std_hyper)`).
pub const DEFAULT_STD_HYPER: f64 = -0.7;

/// `(μ, σ)` of a normal distribution, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normal(pub f64, pub f64);

impl Normal {
    pub fn mean(&self) -> f64 {
        self.0
    }

    pub fn std(&self) -> f64 {
        self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelDist {
    /// Distribution of per-image channel means.
    pub mean: Normal,
    /// Distribution of per-image channel standard deviations.
    pub std: Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabChannels<T> {
    #[serde(rename = "L")]
    pub l: T,
    #[serde(rename = "A")]
    pub a: T,
    #[serde(rename = "B")]
    pub b: T,
}

impl<T: Copy> LabChannels<T> {
    pub fn from_array([l, a, b]: [T; 3]) -> Self {
        Self { l, a, b }
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.l, self.a, self.b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Lab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StainProfile {
    pub space: ColorSpace,
    pub channels: LabChannels<ChannelDist>,
    pub n_images: usize,
}

impl StainProfile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Target LAB statistics for one transfer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl TemplateStats {
    /// The template that leaves `patch` where it is.
    pub fn of_patch(patch: &Patch) -> Self {
        let (mean, std) = LabRaster::from_rgb(patch).channel_stats();
        Self {
            mean,
            std: std.map(|s| s.max(STD_EPS)),
        }
    }
}

/// Source of standard-normal draws, so tests can inject exact values.
pub trait NormalSource {
    fn standard_normal(&mut self) -> f64;
}

impl NormalSource for PipelineRng {
    fn standard_normal(&mut self) -> f64 {
        use rand::Rng;
        self.sample(rand_distr::StandardNormal)
    }
}

fn mean_and_sample_std(xs: &[f64]) -> Normal {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Normal(mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Normal(mean, (ss / (n - 1.0)).sqrt())
}

/// Fit the per-channel distributions of image means and image stds.
pub fn fit_stain_profile(images: &[Raster]) -> Result<StainProfile, AugmentError> {
    if images.is_empty() {
        return Err(AugmentError::EmptyProfileInput);
    }
    let stats: Vec<([f64; 3], [f64; 3])> = images.iter().map(|r| LabRaster::from_rgb(r).channel_stats()).collect();
    let channel = |c: usize| {
        let means: Vec<f64> = stats.iter().map(|s| s.0[c]).collect();
        let stds: Vec<f64> = stats.iter().map(|s| s.1[c]).collect();
        ChannelDist {
            mean: mean_and_sample_std(&means),
            std: mean_and_sample_std(&stds),
        }
    };
    Ok(StainProfile {
        space: ColorSpace::Lab,
        channels: LabChannels::from_array([channel(0), channel(1), channel(2)]),
        n_images: images.len(),
    })
}

/// Draw a template. Sampling σ is scaled by `1 + std_hyper`; draws are taken
/// in the order L-mean, L-std, A-mean, A-std, B-mean, B-std.
pub fn sample_stain_template<N: NormalSource + ?Sized>(
    profile: &StainProfile,
    std_hyper: f64,
    normal: &mut N,
) -> Result<TemplateStats, AugmentError> {
    if !(std_hyper > -1.0) || !std_hyper.is_finite() {
        return Err(AugmentError::BadStdHyper(std_hyper));
    }
    let scale = 1.0 + std_hyper;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for (c, dist) in profile.channels.to_array().iter().enumerate() {
        mean[c] = dist.mean.mean() + scale * dist.mean.std() * normal.standard_normal();
        std[c] = (dist.std.mean() + scale * dist.std.std() * normal.standard_normal()).max(STD_EPS);
    }
    Ok(TemplateStats { mean, std })
}

/// Per-channel LAB mean/std transfer onto `template`.
pub fn reinhard_transfer(patch: &Patch, template: &TemplateStats) -> Patch {
    let mut lab = LabRaster::from_rgb(patch);
    let (mean, std) = lab.channel_stats();
    let gain: [f64; 3] = std::array::from_fn(|c| template.std[c].max(STD_EPS) / std[c].max(STD_EPS));
    for px in &mut lab.data {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) * gain[c] + template.mean[c];
        }
    }
    lab.to_rgb()
}
