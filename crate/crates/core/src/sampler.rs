//! Training-patch planning: foreground / random / imposter patches in a fixed
//! ratio, plus weighted index sampling.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetManifest, Label};
use crate::raster::{PadPolicy, Patch, Raster, RasterError};
use crate::rng::{seeded, PipelineRng};

/// Foreground : random : imposter.
pub const DEFAULT_RATIO: [f64; 3] = [5.0, 1.0, 4.0];
pub const DEFAULT_PATCH_SIZE: usize = 512;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("sampling weights must be finite and >= 0 with a positive sum, got {0:?}")]
    BadWeights(Vec<f64>),
    #[error("patch size must be at least 1")]
    EmptyPatch,
    #[error("{count} {label} patch(es) requested but the manifest has no {label} annotations")]
    MissingClass { label: Label, count: usize },
    #[error("patch size {size} exceeds image {image_id} and padding is disabled")]
    PatchTooLarge { image_id: String, size: usize },
    #[error("no image can hold a {size}px patch without padding")]
    NoImageFits { size: usize },
    #[error("annotation {0} refers to an image missing from the manifest")]
    DanglingAnchor(usize),
    #[error("malformed plan on line {line}: {source}")]
    PlanSyntax {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default = "default_ratio")]
    pub ratio: [f64; 3],
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default)]
    pub count: usize,
    /// Max anchor offset from the patch center; `None` means `patch_size / 8`.
    #[serde(default)]
    pub jitter: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    /// `None` disables padding: every plan must fit inside its image.
    #[serde(default = "default_pad")]
    pub pad: Option<PadPolicy>,
}

fn default_ratio() -> [f64; 3] {
    DEFAULT_RATIO
}
fn default_patch_size() -> usize {
    DEFAULT_PATCH_SIZE
}
fn default_pad() -> Option<PadPolicy> {
    Some(PadPolicy::Reflect)
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            ratio: DEFAULT_RATIO,
            patch_size: DEFAULT_PATCH_SIZE,
            count: 0,
            jitter: None,
            seed: 0,
            pad: default_pad(),
        }
    }
}

impl SamplingSpec {
    pub fn effective_jitter(&self) -> u32 {
        self.jitter.unwrap_or((self.patch_size / 8) as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchKind {
    Foreground,
    Random,
    Imposter,
}

/// One planned patch. `anchor` indexes `DatasetManifest::annotations`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub image_id: String,
    pub x: i64,
    pub y: i64,
    pub size: usize,
    pub kind: PatchKind,
    pub anchor: Option<usize>,
}

impl PatchPlan {
    pub fn origin(&self) -> (i64, i64) {
        (self.x, self.y)
    }
}

fn check_weights(w: &[f64]) -> Result<f64, SamplingError> {
    let ok = w.iter().all(|v| v.is_finite() && *v >= 0.0);
    let sum: f64 = w.iter().sum();
    if !ok || sum <= 0.0 || !sum.is_finite() {
        return Err(SamplingError::BadWeights(w.to_vec()));
    }
    Ok(sum)
}

/// Largest-remainder apportionment of `total` over three weights. Remainder
/// ties go to the earlier category (foreground, random, imposter).
pub fn allocate_counts(total: usize, ratio: [f64; 3]) -> Result<[usize; 3], SamplingError> {
    let sum = check_weights(&ratio)?;
    let mut parts = [0usize; 3];
    let mut order = [0usize, 1, 2];

    let integral = ratio.iter().all(|w| w.fract() == 0.0 && *w < 1e15);
    if integral {
        // exact rational path: share_i = total * w_i / sum
        let den = sum as u128;
        let mut rems = [0u128; 3];
        for i in 0..3 {
            let num = total as u128 * ratio[i] as u128;
            parts[i] = (num / den) as usize;
            rems[i] = num % den;
        }
        order.sort_by(|&a, &b| rems[b].cmp(&rems[a]));
    } else {
        let mut fracs = [0f64; 3];
        for i in 0..3 {
            let share = total as f64 * ratio[i] / sum;
            parts[i] = share.floor() as usize;
            fracs[i] = share - share.floor();
        }
        order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]));
        // rounding can push the floors past the total
        while parts.iter().sum::<usize>() > total {
            let i = order.iter().rev().copied().find(|&i| parts[i] > 0).unwrap();
            parts[i] -= 1;
        }
    }
    let mut leftover = total - parts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        parts[i] += 1;
        leftover -= 1;
    }
    Ok(parts)
}

/// Integer offset drawn uniformly from the disk of radius `jitter`.
fn jitter_offset(rng: &mut PipelineRng, jitter: u32) -> (i64, i64) {
    if jitter == 0 {
        return (0, 0);
    }
    let j = jitter as i64;
    loop {
        let dx = rng.random_range(-j..=j);
        let dy = rng.random_range(-j..=j);
        if dx * dx + dy * dy <= j * j {
            return (dx, dy);
        }
    }
}

fn valid_positions(dim: u32, size: usize, padded: bool) -> u64 {
    let dim = dim as u64;
    let size = size as u64;
    if dim >= size {
        dim - size + 1
    } else if padded {
        1
    } else {
        0
    }
}

#[derive(Clone, Copy)]
struct AnchorGeometry {
    size: usize,
    jitter: u32,
    padded: bool,
}

fn plan_anchored(
    manifest: &DatasetManifest,
    index: &HashMap<&str, usize>,
    label: Label,
    n: usize,
    geom: AnchorGeometry,
    rng: &mut PipelineRng,
    plans: &mut Vec<PatchPlan>,
) -> Result<(), SamplingError> {
    if n == 0 {
        return Ok(());
    }
    let kind = match label {
        Label::Mitotic => PatchKind::Foreground,
        Label::Imposter => PatchKind::Imposter,
    };
    let pool: Vec<usize> = manifest
        .annotations
        .iter()
        .enumerate()
        .filter(|(_, a)| a.label == label)
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(SamplingError::MissingClass { label, count: n });
    }
    let size = geom.size;
    let half = (size / 2) as i64;
    for _ in 0..n {
        let ai = pool[rng.random_range(0..pool.len())];
        let ann = &manifest.annotations[ai];
        let img = index
            .get(ann.image_id.as_str())
            .map(|&i| &manifest.images[i])
            .ok_or(SamplingError::DanglingAnchor(ai))?;
        let (cx, cy) = ann.center.rounded();
        let (dx, dy) = jitter_offset(rng, geom.jitter);
        let mut x = cx + dx - half;
        let mut y = cy + dy - half;
        if !geom.padded {
            if (img.width as usize) < size || (img.height as usize) < size {
                return Err(SamplingError::PatchTooLarge {
                    image_id: img.id.clone(),
                    size,
                });
            }
            x = x.clamp(0, img.width as i64 - size as i64);
            y = y.clamp(0, img.height as i64 - size as i64);
        }
        plans.push(PatchPlan {
            image_id: img.id.clone(),
            x,
            y,
            size,
            kind,
            anchor: Some(ai),
        });
    }
    Ok(())
}

/// Plan `spec.count` patches in `spec.ratio` proportions.
///
/// Plans come out grouped by kind (foreground, random, imposter). Anchored
/// plans put their annotation within `jitter` px of the patch center; with
/// padding disabled the origin is clamped into the image, which can move the
/// anchor further off-center. Random plans are not checked against
/// annotations they may happen to contain.
pub fn plan_samples(manifest: &DatasetManifest, spec: &SamplingSpec) -> Result<Vec<PatchPlan>, SamplingError> {
    if spec.patch_size == 0 {
        return Err(SamplingError::EmptyPatch);
    }
    let [n_fg, n_rand, n_imp] = allocate_counts(spec.count, spec.ratio)?;
    let index = manifest.image_index();
    let padded = spec.pad.is_some();
    let size = spec.patch_size;
    let jitter = spec.effective_jitter();
    let mut rng = seeded(spec.seed);
    let mut plans = Vec::with_capacity(spec.count);

    let geom = AnchorGeometry { size, jitter, padded };
    plan_anchored(manifest, &index, Label::Mitotic, n_fg, geom, &mut rng, &mut plans)?;

    if n_rand > 0 {
        let weights: Vec<f64> = manifest
            .images
            .iter()
            .map(|img| (valid_positions(img.width, size, padded) * valid_positions(img.height, size, padded)) as f64)
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            return Err(SamplingError::NoImageFits { size });
        }
        let pick = WeightedIndex::new(&weights).map_err(|_| SamplingError::BadWeights(weights.clone()))?;
        for _ in 0..n_rand {
            let img = &manifest.images[pick.sample(&mut rng)];
            let nx = valid_positions(img.width, size, padded);
            let ny = valid_positions(img.height, size, padded);
            let x = rng.random_range(0..nx) as i64;
            let y = rng.random_range(0..ny) as i64;
            plans.push(PatchPlan {
                image_id: img.id.clone(),
                x,
                y,
                size,
                kind: PatchKind::Random,
                anchor: None,
            });
        }
    }

    plan_anchored(manifest, &index, Label::Imposter, n_imp, geom, &mut rng, &mut plans)?;
    Ok(plans)
}

/// Cut a square patch at `origin`; see [`Raster::extract`] for padding rules.
pub fn extract_patch(raster: &Raster, origin: (i64, i64), size: usize, pad: PadPolicy) -> Result<Patch, RasterError> {
    raster.extract(origin, size, pad)
}

/// `n` indices drawn with replacement, `P(i) = w_i / Σw`.
pub fn weighted_sample(weights: &[f64], n: usize, seed: u64) -> Result<Vec<usize>, SamplingError> {
    check_weights(weights)?;
    let dist = WeightedIndex::new(weights).map_err(|_| SamplingError::BadWeights(weights.to_vec()))?;
    let mut rng = seeded(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng)).collect())
}

pub fn write_plans_jsonl<W: Write>(plans: &[PatchPlan], mut out: W) -> std::io::Result<()> {
    for p in plans {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_plans_jsonl<R: BufRead>(input: R) -> Result<Vec<PatchPlan>, SamplingError> {
    let mut plans = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        plans.push(serde_json::from_str(&line).map_err(|source| SamplingError::PlanSyntax { line: i + 1, source })?);
    }
    Ok(plans)
}
