//! Stage-1 output handling: IoU, greedy NMS, slide tiling and stitching of
//! per-tile detections back into image coordinates.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::ingest::Label;

pub const DEFAULT_NMS_IOU: f64 = 0.4;
pub const DEFAULT_TILE_SIZE: usize = 512;
pub const DEFAULT_TILE_OVERLAP: usize = 64;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("tile size must be >= 1 and overlap < tile size (tile {tile_size}, overlap {overlap})")]
    BadTiling { tile_size: usize, overlap: usize },
    #[error("malformed detection on line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: Option<Label>,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self {
            bbox,
            score,
            label: None,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            bbox: self.bbox.translated(dx, dy),
            ..*self
        }
    }
}

/// One line of the detections JSON-lines format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        Self {
            image_id: image_id.to_string(),
            x0: d.bbox.x0,
            y0: d.bbox.y0,
            x1: d.bbox.x1,
            y1: d.bbox.y1,
            score: d.score,
        }
    }

    pub fn detection(&self) -> Detection {
        Detection::new(BBox::new(self.x0, self.y0, self.x1, self.y1), self.score)
    }
}

pub fn write_detections_jsonl<W: Write>(records: &[DetectionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parse detection lines, rejecting inverted boxes and scores outside `[0, 1]`.
pub fn read_detections_jsonl<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>, PostprocessError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord = serde_json::from_str(&line).map_err(|e| PostprocessError::Syntax {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !rec.detection().bbox.is_valid() || !(0.0..=1.0).contains(&rec.score) {
            return Err(PostprocessError::Syntax {
                line: i + 1,
                message: "box must satisfy x0<x1, y0<y1 and score must lie in [0, 1]".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices kept by greedy NMS, in keep order.
///
/// Candidates are visited by descending score (equal scores by input index).
/// A candidate is suppressed when its IoU with an already kept box is
/// strictly greater than `iou_threshold`.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tile {
    /// Top-left corner in image pixels; tiles are ordered row-major by origin.
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap: usize,
    pub tiles: Vec<Tile>,
}

fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let last = dim - tile;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let o = pos.min(last);
        if out.last() != Some(&o) {
            out.push(o);
        }
        if pos + tile >= dim {
            break;
        }
        pos += stride;
    }
    out
}

/// Cover a `width`×`height` image with square tiles at stride
/// `tile_size - overlap`; the last row and column are shifted inward to end
/// flush with the border. Images smaller than a tile get one tile at the
/// origin that extends past the image.
pub fn tile_plan(width: usize, height: usize, tile_size: usize, overlap: usize) -> Result<TileGrid, PostprocessError> {
    if tile_size == 0 || overlap >= tile_size {
        return Err(PostprocessError::BadTiling { tile_size, overlap });
    }
    let stride = tile_size - overlap;
    let xs = axis_origins(width, tile_size, stride);
    let ys = axis_origins(height, tile_size, stride);
    let tiles = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| Tile { y, x, size: tile_size }))
        .collect();
    Ok(TileGrid {
        tile_size,
        overlap,
        tiles,
    })
}

/// Shift tile-local detections into image coordinates and run one global NMS.
/// Tiles are merged in origin order so the result does not depend on the
/// order the caller collected them in.
pub fn stitch(per_tile: &[((f64, f64), Vec<Detection>)], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..per_tile.len()).collect();
    order.sort_by(|&a, &b| {
        let (ax, ay) = per_tile[a].0;
        let (bx, by) = per_tile[b].0;
        ay.total_cmp(&by).then(ax.total_cmp(&bx))
    });
    let global: Vec<Detection> = order
        .into_iter()
        .flat_map(|i| {
            let ((ox, oy), dets) = &per_tile[i];
            dets.iter().map(move |d| d.translated(*ox, *oy))
        })
        .collect();
    nms(&global, iou_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, s: f64) -> Detection {
        Detection::new(BBox::new(x0, y0, x1, y1), s)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)) - 50.0 / 150.0).abs() < 1e-12);
        // touching edges have zero intersection
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn nms_examples() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(1.0, 1.0, 11.0, 11.0, 0.8);
        assert!((iou(&a.bbox, &b.bbox) - 81.0 / 119.0).abs() < 1e-12);
        assert_eq!(nms(&[a, b], 0.4), vec![a]);
        assert_eq!(nms(&[b, a], 0.4), vec![a]);
        assert_eq!(nms(&[a], 0.4), vec![a]);

        let c = det(50.0, 50.0, 60.0, 60.0, 0.95);
        assert_eq!(nms(&[a, c], 0.4), vec![c, a]);
        assert!(nms(&[], 0.4).is_empty());
    }

    #[test]
    fn boundary_iou_survives() {
        // IoU exactly 0.4 is not suppressed: 40/100 with equal areas needs
        // inter/(200-inter) = 0.4 -> inter = 400/7; use a sliding box instead
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = det(0.0, 0.0, 10.0, 4.0, 0.8);
        assert_eq!(iou(&a.bbox, &b.bbox), 0.4);
        assert_eq!(nms(&[a, b], 0.4).len(), 2);
    }

    #[test]
    fn ties_keep_input_order() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.5);
        let b = det(0.0, 0.0, 10.0, 10.0, 0.5);
        let b = Detection {
            label: Some(Label::Imposter),
            ..b
        };
        assert_eq!(nms(&[a, b], 0.4), vec![a]);
        assert_eq!(nms(&[b, a], 0.4), vec![b]);
    }

    #[test]
    fn tile_examples() {
        let g = tile_plan(512, 512, 512, 0).unwrap();
        assert_eq!(g.tiles, vec![Tile { x: 0, y: 0, size: 512 }]);
        let g = tile_plan(1024, 512, 512, 0).unwrap();
        let xs: Vec<_> = g.tiles.iter().map(|t| (t.x, t.y)).collect();
        assert_eq!(xs, vec![(0, 0), (512, 0)]);
        let g = tile_plan(800, 512, 512, 64).unwrap();
        let xs: Vec<_> = g.tiles.iter().map(|t| t.x).collect();
        assert_eq!(xs, vec![0, 288]);
        let g = tile_plan(100, 40, 512, 64).unwrap();
        assert_eq!(g.tiles.len(), 1);
        assert!(matches!(
            tile_plan(10, 10, 64, 64),
            Err(PostprocessError::BadTiling { .. })
        ));
        assert!(tile_plan(10, 10, 0, 0).is_err());
    }

    #[test]
    fn stitch_translates() {
        let out = stitch(&[((512.0, 0.0), vec![det(0.0, 0.0, 50.0, 50.0, 0.7)])], 0.4);
        assert_eq!(out, vec![det(512.0, 0.0, 562.0, 50.0, 0.7)]);
        assert!(stitch(&[], 0.4).is_empty());
    }

    #[test]
    fn stitch_merges_duplicate_from_overlap() {
        // same object at global (470..520, 100..150), seen by tiles at x=0 and x=448
        let left = ((0.0, 0.0), vec![det(470.0, 100.0, 520.0, 150.0, 0.6)]);
        let right = ((448.0, 0.0), vec![det(23.0, 101.0, 73.0, 151.0, 0.8)]);
        let out = stitch(&[left, right], 0.4);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.8);
        assert_eq!(out[0].bbox, BBox::new(471.0, 101.0, 521.0, 151.0));
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let recs = vec![
            DetectionRecord::new("a", &det(1.5, 2.0, 30.25, 40.0, 0.123456789)),
            DetectionRecord::new("b", &det(0.1, 0.2, 0.3, 0.4, 1.0)),
        ];
        let mut buf = Vec::new();
        write_detections_jsonl(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"image_id":"a","x0":1.5,"y0":2.0,"x1":30.25,"y1":40.0,"score":0.123456789}"#
        );
        assert_eq!(read_detections_jsonl(&buf[..]).unwrap(), recs);
        assert!(read_detections_jsonl(&b"{\"image_id\":\"a\"}\n"[..]).is_err());
        let inverted = br#"{"image_id":"a","x0":5,"y0":0,"x1":1,"y1":1,"score":0.5}"#;
        assert!(read_detections_jsonl(&inverted[..]).is_err());
    }
}
