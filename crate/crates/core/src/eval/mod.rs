//! Point-based detection scoring: radius matching, confusion counts and
//! precision / recall / F1, per image and pooled.

pub mod matching;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use matching::{match_points, MatchPair, MatchResult, MatchStrategy};

use crate::geometry::Point;
use crate::ingest::{DatasetManifest, Label, DEFAULT_MICRONS_PER_PIXEL};
use crate::postprocess::DetectionRecord;

pub const DEFAULT_RADIUS_MICRONS: f64 = 7.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction references unknown image id {0:?}")]
    UnknownImage(String),
    #[error("matching radius must be > 0, got {0}")]
    BadRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radius {
    Pixels(f64),
    /// Converted per image through its microns-per-pixel.
    Microns(f64),
}

impl Default for Radius {
    fn default() -> Self {
        Radius::Microns(DEFAULT_RADIUS_MICRONS)
    }
}

impl Radius {
    pub fn to_pixels(self, microns_per_pixel: f64) -> f64 {
        match self {
            Radius::Pixels(px) => px,
            Radius::Microns(um) => um / microns_per_pixel,
        }
    }

    fn value(self) -> f64 {
        match self {
            Radius::Pixels(v) | Radius::Microns(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    #[serde(default)]
    pub radius: Radius,
    #[serde(default)]
    pub strategy: MatchStrategy,
}

impl MatchConfig {
    pub fn pixels(radius: f64) -> Self {
        Self {
            radius: Radius::Pixels(radius),
            strategy: MatchStrategy::GreedyByDistance,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let v = self.radius.value();
        if !(v > 0.0) || !v.is_finite() {
            return Err(EvalError::BadRadius(v));
        }
        Ok(())
    }
}

/// Match with a radius already resolved to pixels.
pub fn match_detections(preds: &[(Point, f64)], gts: &[Point], radius_px: f64, strategy: MatchStrategy) -> MatchResult {
    match_points(preds, gts, radius_px, strategy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1: f1(precision, recall),
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision implied by an F1 and a recall.
pub fn precision_from_f1(f1: f64, recall: f64) -> f64 {
    f1 * recall / (2.0 * recall - f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// Pixel radius when it is the same for every image.
    pub radius_px: Option<f64>,
    pub radius: Radius,
    pub strategy: MatchStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: BTreeMap<String, Metrics>,
    pub pooled: Metrics,
    pub config: ReportConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Score predictions against the mitotic annotations of `manifest`.
///
/// Every manifest image gets an entry, including those without predictions.
/// Pooled metrics come from summed counts.
pub fn evaluate_run(
    records: &[DetectionRecord],
    manifest: &DatasetManifest,
    cfg: &MatchConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let index = manifest.image_index();
    let mut preds: Vec<Vec<(Point, f64)>> = vec![Vec::new(); manifest.images.len()];
    for r in records {
        let i = *index
            .get(r.image_id.as_str())
            .ok_or_else(|| EvalError::UnknownImage(r.image_id.clone()))?;
        preds[i].push((r.detection().bbox.center(), r.score));
    }
    let mut gts: Vec<Vec<Point>> = vec![Vec::new(); manifest.images.len()];
    for a in &manifest.annotations {
        if a.label == Label::Mitotic {
            if let Some(&i) = index.get(a.image_id.as_str()) {
                gts[i].push(a.center);
            }
        }
    }

    let mut per_image = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut radii = Vec::new();
    for (i, img) in manifest.images.iter().enumerate() {
        let radius_px = cfg.radius.to_pixels(img.microns_per_pixel);
        radii.push(radius_px);
        let m = match_points(&preds[i], &gts[i], radius_px, cfg.strategy);
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        per_image.insert(img.id.clone(), metrics_from_counts(m.tp, m.fp, m.fn_));
    }
    let radius_px = match cfg.radius {
        Radius::Pixels(px) => Some(px),
        Radius::Microns(_) if radii.windows(2).all(|w| w[0] == w[1]) => Some(
            radii
                .first()
                .copied()
                .unwrap_or(cfg.radius.to_pixels(DEFAULT_MICRONS_PER_PIXEL)),
        ),
        Radius::Microns(_) => None,
    };
    Ok(EvalReport {
        per_image,
        pooled: metrics_from_counts(tp, fp, fn_),
        config: ReportConfig {
            radius_px,
            radius: cfg.radius,
            strategy: cfg.strategy,
        },
    })
}
