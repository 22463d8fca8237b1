//! Conversion from COCO-style annotation files.
//!
//! Only `images[]` (`id`, `file_name`, `width`, `height`) and `annotations[]`
//! (`image_id`, `bbox` as `[x, y, w, h]`, `category_id`) are read. Annotation
//! centers are bbox centers.

use std::collections::BTreeMap;

use serde::Deserialize;
use serde_json::Value;

use super::{validate, Annotation, DatasetManifest, ImageRecord, Label, ManifestError, DEFAULT_MICRONS_PER_PIXEL};
use crate::geometry::BBox;

#[derive(Debug, Clone)]
pub struct CocoImportOptions {
    pub name: String,
    pub category_map: BTreeMap<i64, Label>,
    pub microns_per_pixel: f64,
}

impl Default for CocoImportOptions {
    fn default() -> Self {
        Self {
            name: "coco-import".to_string(),
            category_map: BTreeMap::from([(1, Label::Mitotic), (2, Label::Imposter)]),
            microns_per_pixel: DEFAULT_MICRONS_PER_PIXEL,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportSummary {
    pub images: usize,
    pub annotations: usize,
    /// Annotations dropped because their category has no mapping.
    pub skipped_unmapped: BTreeMap<i64, usize>,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: Value,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: Value,
    bbox: [f64; 4],
    category_id: i64,
}

fn id_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn import_coco(text: &str, opts: &CocoImportOptions) -> Result<(DatasetManifest, ImportSummary), ManifestError> {
    let coco: CocoFile = serde_json::from_str(text).map_err(ManifestError::syntax)?;
    let mut summary = ImportSummary::default();

    let images: Vec<ImageRecord> = coco
        .images
        .iter()
        .map(|i| ImageRecord {
            id: id_string(&i.id),
            path: i.file_name.clone(),
            width: i.width,
            height: i.height,
            microns_per_pixel: opts.microns_per_pixel,
        })
        .collect();

    let mut annotations = Vec::with_capacity(coco.annotations.len());
    for a in &coco.annotations {
        let Some(&label) = opts.category_map.get(&a.category_id) else {
            *summary.skipped_unmapped.entry(a.category_id).or_default() += 1;
            continue;
        };
        let [x, y, w, h] = a.bbox;
        let bbox = BBox::new(x, y, x + w, y + h);
        annotations.push(Annotation {
            image_id: id_string(&a.image_id),
            center: bbox.center(),
            bbox: Some(bbox),
            label,
        });
    }

    summary.images = images.len();
    summary.annotations = annotations.len();
    let manifest = DatasetManifest {
        name: opts.name.clone(),
        images,
        annotations,
    };
    let issues = validate(&manifest);
    if !issues.is_empty() {
        return Err(ManifestError::Invalid(issues));
    }
    Ok((manifest, summary))
}
