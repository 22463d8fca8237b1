//! Classical stage-1 stand-in: dark connected components become fixed-size
//! boxes.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Point};
use crate::ingest::DEFAULT_BOX_SIDE;
use crate::postprocess::Detection;
use crate::protocol::Handler;
use crate::raster::{luma, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobParams {
    /// Pixels with luma strictly below this are foreground.
    #[serde(default = "default_threshold")]
    pub intensity_threshold: f64,
    #[serde(default = "default_min_area")]
    pub min_area: usize,
    #[serde(default = "default_max_area")]
    pub max_area: usize,
    #[serde(default = "default_box_size")]
    pub box_size: f64,
}

fn default_threshold() -> f64 {
    120.0
}
fn default_min_area() -> usize {
    100
}
fn default_max_area() -> usize {
    5000
}
fn default_box_size() -> f64 {
    DEFAULT_BOX_SIDE
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            intensity_threshold: default_threshold(),
            min_area: default_min_area(),
            max_area: default_max_area(),
            box_size: default_box_size(),
        }
    }
}

impl BlobParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=255.0).contains(&self.intensity_threshold) {
            return Err(format!(
                "intensity_threshold {} outside 0..=255",
                self.intensity_threshold
            ));
        }
        if self.min_area > self.max_area {
            return Err(format!("min_area {} > max_area {}", self.min_area, self.max_area));
        }
        if !(self.box_size > 0.0) {
            return Err(format!("box_size must be > 0, got {}", self.box_size));
        }
        Ok(())
    }
}

/// One 8-connected foreground component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub area: usize,
    /// Mean of pixel centers (`x + 0.5`, `y + 0.5`).
    pub centroid: Point,
    pub mean_luma: f64,
    /// Inclusive pixel bounds `[min_x, min_y, max_x, max_y]`.
    pub bounds: [usize; 4],
}

/// Components in raster order of their first pixel.
pub fn find_blobs(raster: &Raster, threshold: f64) -> Vec<Blob> {
    let (w, h) = (raster.width(), raster.height());
    let lum: Vec<f64> = raster.pixels().map(luma).collect();
    let mut seen: Vec<bool> = lum.iter().map(|&l| l >= threshold).collect();
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut area, mut sx, mut sy, mut sl) = (0usize, 0.0, 0.0, 0.0);
        let mut bounds = [usize::MAX, usize::MAX, 0, 0];
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            sl += lum[i];
            bounds = [bounds[0].min(x), bounds[1].min(y), bounds[2].max(x), bounds[3].max(y)];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        let n = area as f64;
        blobs.push(Blob {
            area,
            centroid: Point::new(sx / n, sy / n),
            mean_luma: sl / n,
            bounds,
        });
    }
    blobs
}

fn to_detection(b: &Blob, params: &BlobParams) -> Detection {
    Detection::new(BBox::centered(b.centroid, params.box_size), 1.0 - b.mean_luma / 255.0)
}

fn area_ok(b: &Blob, params: &BlobParams) -> bool {
    (params.min_area..=params.max_area).contains(&b.area)
}

/// Dark components with area in `[min_area, max_area]`, as `box_size`
/// boxes centered on their centroids.
pub fn blob_detect(tile: &Raster, params: &BlobParams) -> Vec<Detection> {
    find_blobs(tile, params.intensity_threshold)
        .iter()
        .filter(|b| area_ok(b, params))
        .map(|b| to_detection(b, params))
        .collect()
}

/// Which tile edges are shared with a neighbouring tile: left, top, right,
/// bottom.
pub type InteriorEdges = [bool; 4];

/// Like [`blob_detect`], but components touching an interior edge are left
/// to the neighbouring tile that sees them whole.
pub fn blob_detect_tile(tile: &Raster, params: &BlobParams, interior: InteriorEdges) -> Vec<Detection> {
    let (w, h) = (tile.width(), tile.height());
    find_blobs(tile, params.intensity_threshold)
        .iter()
        .filter(|b| area_ok(b, params))
        .filter(|b| {
            let [x0, y0, x1, y1] = b.bounds;
            !((interior[0] && x0 == 0)
                || (interior[1] && y0 == 0)
                || (interior[2] && x1 + 1 == w)
                || (interior[3] && y1 + 1 == h))
        })
        .map(|b| to_detection(b, params))
        .collect()
}

/// Serves [`blob_detect`] as an external detector. It cannot score patches.
impl Handler for BlobParams {
    fn name(&self) -> &str {
        "mock-blob-detector"
    }

    fn score(&mut self, _patches: &[crate::raster::Patch]) -> Result<Vec<[f64; 2]>, String> {
        Err("this server only detects".into())
    }

    fn detect(&mut self, tile: &Raster) -> Result<Vec<[f64; 5]>, String> {
        Ok(blob_detect(tile, self)
            .iter()
            .map(|d| [d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1, d.score])
            .collect())
    }
}
