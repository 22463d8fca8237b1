//! Dataset manifests: parsing, validation, class statistics and image loading.
//!
//! The canonical on-disk form is a single JSON document:
//!
//! ```json
//! {"name": "pooled",
//!  "images": [{"id": "a", "path": "a.png", "width": 1024, "height": 1024, "mpp": 0.25}],
//!  "annotations": [{"image_id": "a", "x": 300.0, "y": 300.0, "bbox": [275, 275, 325, 325], "label": "mitotic"}]}
//! ```
//!
//! `mpp` and `bbox` are optional. COCO files are converted with [`coco::import_coco`].

pub mod coco;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};
use crate::raster::{Raster, RasterError};

/// 40× scan resolution, assumed when a manifest omits `mpp`.
pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.25;

/// Side of the square box given to point annotations when a box is needed.
pub const DEFAULT_BOX_SIDE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Mitotic,
    Imposter,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Mitotic => "mitotic",
            Label::Imposter => "imposter",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub width: u32,
    pub height: u32,
    pub microns_per_pixel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub center: Point,
    pub bbox: Option<BBox>,
    pub label: Label,
}

impl Annotation {
    /// The annotation's box, or a square of `side` px around its center.
    pub fn bbox_or_square(&self, side: f64) -> BBox {
        self.bbox.unwrap_or_else(|| BBox::centered(self.center, side))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub name: String,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub mitotic: usize,
    pub imposter: usize,
    pub total_annotations: usize,
}

/// Which record a validation issue refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordRef {
    Image { index: usize, id: String },
    Annotation { index: usize, image_id: String },
}

impl fmt::Display for RecordRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordRef::Image { index, id } => write!(f, "images[{index}] (id {id:?})"),
            RecordRef::Annotation { index, image_id } => {
                write!(f, "annotations[{index}] (image_id {image_id:?})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IssueKind {
    #[error("duplicate image id")]
    DuplicateImageId,
    #[error("width and height must be at least 1")]
    EmptyImage,
    #[error("microns per pixel must be finite and > 0, got {0}")]
    BadMpp(f64),
    #[error("image id is not declared in images[]")]
    UnknownImage,
    #[error("center ({x}, {y}) lies outside the {width}x{height} image")]
    CenterOutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("bbox [{x0}, {y0}, {x1}, {y1}] is inverted or non-finite")]
    InvertedBox { x0: f64, y0: f64, x1: f64, y1: f64 },
    #[error("center lies outside its bbox")]
    CenterOutsideBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationIssue {
    pub record: RecordRef,
    pub kind: IssueKind,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record, self.kind)
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest JSON at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} invalid record(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<ValidationIssue>),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ManifestError {
    fn syntax(e: serde_json::Error) -> Self {
        ManifestError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ImageLoadError {
    #[error("image file {0} does not exist")]
    Missing(PathBuf),
    #[error(transparent)]
    Decode(#[from] RasterError),
    #[error("image {id} is {actual_w}x{actual_h} on disk but the manifest says {expected_w}x{expected_h}")]
    DimensionMismatch {
        id: String,
        expected_w: u32,
        expected_h: u32,
        actual_w: usize,
        actual_h: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct WireManifest {
    name: String,
    images: Vec<WireImage>,
    #[serde(default)]
    annotations: Vec<WireAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct WireImage {
    id: String,
    path: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mpp: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct WireAnnotation {
    image_id: String,
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    label: Label,
}

impl From<WireManifest> for DatasetManifest {
    fn from(w: WireManifest) -> Self {
        DatasetManifest {
            name: w.name,
            images: w
                .images
                .into_iter()
                .map(|i| ImageRecord {
                    id: i.id,
                    path: i.path,
                    width: i.width,
                    height: i.height,
                    microns_per_pixel: i.mpp.unwrap_or(DEFAULT_MICRONS_PER_PIXEL),
                })
                .collect(),
            annotations: w
                .annotations
                .into_iter()
                .map(|a| Annotation {
                    image_id: a.image_id,
                    center: Point::new(a.x, a.y),
                    bbox: a.bbox.map(BBox::from),
                    label: a.label,
                })
                .collect(),
        }
    }
}

impl From<&DatasetManifest> for WireManifest {
    fn from(m: &DatasetManifest) -> Self {
        WireManifest {
            name: m.name.clone(),
            images: m
                .images
                .iter()
                .map(|i| WireImage {
                    id: i.id.clone(),
                    path: i.path.clone(),
                    width: i.width,
                    height: i.height,
                    mpp: Some(i.microns_per_pixel),
                })
                .collect(),
            annotations: m
                .annotations
                .iter()
                .map(|a| WireAnnotation {
                    image_id: a.image_id.clone(),
                    x: a.center.x,
                    y: a.center.y,
                    bbox: a.bbox.map(BBox::to_array),
                    label: a.label,
                })
                .collect(),
        }
    }
}

/// Parse and fully validate a manifest document.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest, ManifestError> {
    let wire: WireManifest = serde_json::from_str(text).map_err(ManifestError::syntax)?;
    let manifest = DatasetManifest::from(wire);
    let issues = validate(&manifest);
    if issues.is_empty() {
        Ok(manifest)
    } else {
        Err(ManifestError::Invalid(issues))
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text)
}

/// Check every invariant; one issue per offending record and rule.
pub fn validate(m: &DatasetManifest) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for (index, img) in m.images.iter().enumerate() {
        let record = || RecordRef::Image {
            index,
            id: img.id.clone(),
        };
        if !seen.insert(img.id.as_str()) {
            issues.push(ValidationIssue {
                record: record(),
                kind: IssueKind::DuplicateImageId,
            });
        }
        if img.width == 0 || img.height == 0 {
            issues.push(ValidationIssue {
                record: record(),
                kind: IssueKind::EmptyImage,
            });
        }
        if !(img.microns_per_pixel.is_finite() && img.microns_per_pixel > 0.0) {
            issues.push(ValidationIssue {
                record: record(),
                kind: IssueKind::BadMpp(img.microns_per_pixel),
            });
        }
    }

    let by_id = m.image_index();
    for (index, ann) in m.annotations.iter().enumerate() {
        let record = || RecordRef::Annotation {
            index,
            image_id: ann.image_id.clone(),
        };
        let Some(&img_idx) = by_id.get(ann.image_id.as_str()) else {
            issues.push(ValidationIssue {
                record: record(),
                kind: IssueKind::UnknownImage,
            });
            continue;
        };
        let img = &m.images[img_idx];
        let Point { x, y } = ann.center;
        let inside =
            x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0 && x < img.width as f64 && y < img.height as f64;
        if !inside {
            issues.push(ValidationIssue {
                record: record(),
                kind: IssueKind::CenterOutOfBounds {
                    x,
                    y,
                    width: img.width,
                    height: img.height,
                },
            });
        }
        if let Some(b) = ann.bbox {
            if !b.is_valid() {
                issues.push(ValidationIssue {
                    record: record(),
                    kind: IssueKind::InvertedBox {
                        x0: b.x0,
                        y0: b.y0,
                        x1: b.x1,
                        y1: b.y1,
                    },
                });
            } else if !b.contains(ann.center) {
                issues.push(ValidationIssue {
                    record: record(),
                    kind: IssueKind::CenterOutsideBox,
                });
            }
        }
    }
    issues
}

pub fn class_counts(m: &DatasetManifest) -> ClassCounts {
    let mitotic = m.annotations.iter().filter(|a| a.label == Label::Mitotic).count();
    let imposter = m.annotations.len() - mitotic;
    ClassCounts {
        mitotic,
        imposter,
        total_annotations: m.annotations.len(),
    }
}

impl DatasetManifest {
    /// Serialize to the canonical JSON form; `mpp` is always written.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WireManifest::from(self)).expect("manifest is always serializable")
    }

    /// Image id to position; the first record wins on duplicates.
    pub fn image_index(&self) -> HashMap<&str, usize> {
        let mut index = HashMap::with_capacity(self.images.len());
        for (i, img) in self.images.iter().enumerate() {
            index.entry(img.id.as_str()).or_insert(i);
        }
        index
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn annotations_for<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }
}

/// Resolve `record.path` against `base_dir` (unless absolute), decode it and
/// check its dimensions against the manifest.
pub fn load_image(record: &ImageRecord, base_dir: &Path) -> Result<Raster, ImageLoadError> {
    let path = resolve_path(&record.path, base_dir);
    if !path.exists() {
        return Err(ImageLoadError::Missing(path));
    }
    let raster = Raster::load(&path)?;
    if raster.width() != record.width as usize || raster.height() != record.height as usize {
        return Err(ImageLoadError::DimensionMismatch {
            id: record.id.clone(),
            expected_w: record.width,
            expected_h: record.height,
            actual_w: raster.width(),
            actual_h: raster.height(),
        });
    }
    Ok(raster)
}

pub fn resolve_path(path: &str, base_dir: &Path) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}
