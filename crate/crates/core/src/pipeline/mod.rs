//! End-to-end orchestration: tile, detect, stitch, classify, evaluate, and
//! persist every intermediate under an output directory.
//!
//! Output layout:
//!
//! ```text
//! out/predictions.jsonl      kept detections, all images in manifest order
//! out/stage1/<id>.jsonl      post-NMS stage-1 detections
//! out/probs/<id>.jsonl       per-candidate scorer probabilities
//! out/report.json            when the manifest has annotations
//! out/run_config.json        the resolved configuration
//! ```

pub mod blob;
pub mod synthetic;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blob::{blob_detect, blob_detect_tile, find_blobs, Blob, BlobParams};
pub use synthetic::{gen_synthetic, Preset, SyntheticError, SyntheticSpec};

use crate::ensemble::{classify_candidates, CandidateProbs, EnsembleConfig, EnsembleError, Scorer};
use crate::eval::{evaluate_run, EvalError, EvalReport, MatchConfig};
use crate::geometry::BBox;
use crate::ingest::{load_image, DatasetManifest, ImageLoadError};
use crate::postprocess::{
    read_detections_jsonl, stitch, tile_plan, write_detections_jsonl, Detection, DetectionRecord, PostprocessError,
    Tile, DEFAULT_NMS_IOU, DEFAULT_TILE_OVERLAP, DEFAULT_TILE_SIZE,
};
use crate::protocol::{encode_patch, Channel, Message, ProtocolError};
use crate::raster::{PadPolicy, Raster, RasterError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: ImageLoadError,
    },
    #[error("image {image_id}, stage 1: {source}")]
    Stage1 {
        image_id: String,
        #[source]
        source: DetectorError,
    },
    #[error("image {image_id}, stage 2: {source}")]
    Stage2 {
        image_id: String,
        #[source]
        source: EnsembleError,
    },
    #[error("detector: {0}")]
    Detector(#[source] ProtocolError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: PostprocessError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// True when an external scorer or detector broke the protocol.
    pub fn is_protocol(&self) -> bool {
        match self {
            PipelineError::Detector(_) => true,
            PipelineError::Stage1 { source, .. } => matches!(source, DetectorError::Protocol(_)),
            PipelineError::Stage2 { source, .. } | PipelineError::Ensemble(source) => source.is_protocol(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec {
    Blob(BlobParams),
    /// Speaks the scorer framing with `detect` / `boxes` messages.
    External {
        command: Vec<String>,
    },
}

impl Default for DetectorSpec {
    fn default() -> Self {
        DetectorSpec::Blob(BlobParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_tile_size")]
    pub tile_size: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_nms_iou")]
    pub nms_iou: f64,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub detector: DetectorSpec,
    #[serde(default)]
    pub eval: MatchConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_tile_size() -> usize {
    DEFAULT_TILE_SIZE
}
fn default_overlap() -> usize {
    DEFAULT_TILE_OVERLAP
}
fn default_nms_iou() -> f64 {
    DEFAULT_NMS_IOU
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_TILE_OVERLAP,
            nms_iou: DEFAULT_NMS_IOU,
            ensemble: EnsembleConfig::default(),
            detector: DetectorSpec::default(),
            eval: MatchConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return Err(PipelineError::Config(format!(
                "need 0 <= overlap < tile_size, got overlap {} and tile_size {}",
                self.overlap, self.tile_size
            )));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(PipelineError::Config(format!(
                "nms_iou {} outside [0, 1]",
                self.nms_iou
            )));
        }
        if let DetectorSpec::Blob(p) = &self.detector {
            p.validate().map_err(PipelineError::Config)?;
        }
        if let DetectorSpec::External { command } = &self.detector {
            if command.is_empty() {
                return Err(PipelineError::Config("external detector command is empty".into()));
            }
        }
        self.ensemble.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// A connected stage-1 detector.
#[derive(Debug)]
pub enum Detector {
    Blob(BlobParams),
    External(Channel),
}

impl Detector {
    pub fn connect(spec: &DetectorSpec, tile_size: usize) -> Result<Self, ProtocolError> {
        Ok(match spec {
            DetectorSpec::Blob(p) => Detector::Blob(*p),
            DetectorSpec::External { command } => Detector::External(Channel::spawn(command, tile_size)?),
        })
    }

    pub fn close(&mut self) -> Result<(), ProtocolError> {
        match self {
            Detector::Blob(_) => Ok(()),
            Detector::External(ch) => ch.close(),
        }
    }
}

fn external_detect(ch: &mut Channel, tile: &Raster) -> Result<Vec<Detection>, ProtocolError> {
    let encoded = encode_patch(tile);
    let reply = ch.request(|id| Message::Detect {
        id,
        width: tile.width() as u32,
        height: tile.height() as u32,
        tile: encoded,
    })?;
    let Message::Boxes { boxes, .. } = reply else {
        return Err(ProtocolError::Unexpected {
            expected: "boxes",
            got: reply.kind().into(),
        });
    };
    boxes
        .into_iter()
        .map(|b| {
            let bbox = BBox::new(b[0], b[1], b[2], b[3]);
            if bbox.is_valid() && (0.0..=1.0).contains(&b[4]) {
                Ok(Detection::new(bbox, b[4]))
            } else {
                Err(ProtocolError::BadBox(b))
            }
        })
        .collect()
}

/// Tile the raster, run the detector on every tile and merge with global NMS.
///
/// The blob detector sees in-bounds crops and skips components on edges
/// shared with a neighbour, which the overlap then sees whole. External
/// detectors get full reflect-padded tiles; boxes whose centers fall outside
/// the image are dropped.
pub fn run_stage1(
    raster: &Raster,
    cfg: &PipelineConfig,
    detector: &mut Detector,
) -> Result<Vec<Detection>, DetectorError> {
    let (w, h) = (raster.width(), raster.height());
    if w == 0 || h == 0 {
        return Ok(Vec::new());
    }
    let grid = tile_plan(w, h, cfg.tile_size, cfg.overlap)
        .map_err(|e| DetectorError::Protocol(ProtocolError::Malformed(e.to_string())))?;
    let per_tile: Vec<((f64, f64), Vec<Detection>)> = match detector {
        Detector::Blob(params) => grid
            .tiles
            .par_iter()
            .map(|t| {
                let tw = t.size.min(w - t.x);
                let th = t.size.min(h - t.y);
                let crop = raster.extract_rect((t.x as i64, t.y as i64), tw, th, PadPolicy::Reflect)?;
                let interior = [t.x > 0, t.y > 0, t.x + tw < w, t.y + th < h];
                Ok(((t.x as f64, t.y as f64), blob_detect_tile(&crop, params, interior)))
            })
            .collect::<Result<_, RasterError>>()?,
        Detector::External(ch) => {
            let mut out = Vec::with_capacity(grid.tiles.len());
            for t in &grid.tiles {
                let tile = raster.extract((t.x as i64, t.y as i64), t.size, PadPolicy::Reflect)?;
                let dets = external_detect(ch, &tile)?
                    .into_iter()
                    .filter(|d| inside_image(d, t, w, h))
                    .collect();
                out.push(((t.x as f64, t.y as f64), dets));
            }
            out
        }
    };
    Ok(stitch(&per_tile, cfg.nms_iou))
}

fn inside_image(d: &Detection, t: &Tile, w: usize, h: usize) -> bool {
    let c = d.bbox.center();
    let (x, y) = (c.x + t.x as f64, c.y + t.y as f64);
    x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64
}

/// File name used for an image's per-image outputs.
pub fn image_file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub stage1: Vec<Detection>,
    pub kept: Vec<Detection>,
    pub candidates: Vec<CandidateProbs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub images: Vec<ImageResult>,
    pub predictions: Vec<DetectionRecord>,
    pub report: Option<EvalReport>,
}

impl RunSummary {
    pub fn stage1_records(&self) -> Vec<DetectionRecord> {
        self.images
            .iter()
            .flat_map(|r| r.stage1.iter().map(|d| DetectionRecord::new(&r.image_id, d)))
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn records_bytes(image_id: &str, dets: &[Detection]) -> Vec<u8> {
    let recs: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord::new(image_id, d)).collect();
    let mut buf = Vec::new();
    write_detections_jsonl(&recs, &mut buf).expect("writing to memory");
    buf
}

fn probs_bytes(candidates: &[CandidateProbs]) -> Vec<u8> {
    let mut buf = Vec::new();
    for c in candidates {
        serde_json::to_writer(&mut buf, c).expect("serializes");
        buf.push(b'\n');
    }
    buf
}

fn make_dirs(out: &Path, stage2: bool) -> Result<(), PipelineError> {
    let mut dirs = vec![out.join("stage1")];
    if stage2 {
        dirs.push(out.join("probs"));
    }
    for d in dirs {
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    Ok(())
}

fn write_stage1(out: &Path, image_id: &str, dets: &[Detection]) -> Result<(), PipelineError> {
    let path = out.join("stage1").join(format!("{}.jsonl", image_file_stem(image_id)));
    write_file(&path, &records_bytes(image_id, dets))
}

fn read_stage1(dir: &Path, image_id: &str) -> Result<Vec<Detection>, PipelineError> {
    let path = dir.join(format!("{}.jsonl", image_file_stem(image_id)));
    let file = File::open(&path).map_err(io_err(&path))?;
    let recs = read_detections_jsonl(BufReader::new(file)).map_err(|source| PipelineError::Read {
        path: path.clone(),
        source,
    })?;
    Ok(recs.iter().map(DetectionRecord::detection).collect())
}

fn write_config(out: &Path, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    write_file(&out.join("run_config.json"), cfg.to_json().as_bytes())
}

fn load(manifest: &DatasetManifest, base_dir: &Path, i: usize) -> Result<Raster, PipelineError> {
    let rec = &manifest.images[i];
    load_image(rec, base_dir).map_err(|source| PipelineError::Image {
        image_id: rec.id.clone(),
        source,
    })
}

/// Stage 1 only: writes `stage1/` and `run_config.json`.
pub fn run_detect(
    manifest: &DatasetManifest,
    base_dir: &Path,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<Vec<ImageResult>, PipelineError> {
    cfg.validate()?;
    make_dirs(out, false)?;
    let mut detector = Detector::connect(&cfg.detector, cfg.tile_size).map_err(PipelineError::Detector)?;
    let mut results = Vec::with_capacity(manifest.images.len());
    for (i, rec) in manifest.images.iter().enumerate() {
        let raster = load(manifest, base_dir, i)?;
        let stage1 = run_stage1(&raster, cfg, &mut detector).map_err(|source| PipelineError::Stage1 {
            image_id: rec.id.clone(),
            source,
        })?;
        write_stage1(out, &rec.id, &stage1)?;
        results.push(ImageResult {
            image_id: rec.id.clone(),
            stage1,
            kept: Vec::new(),
            candidates: Vec::new(),
        });
    }
    detector.close().map_err(PipelineError::Detector)?;
    write_config(out, cfg)?;
    Ok(results)
}

fn stage2(
    manifest: &DatasetManifest,
    base_dir: &Path,
    cfg: &PipelineConfig,
    out: &Path,
    mut stage1_for: impl FnMut(usize, &Raster) -> Result<Vec<Detection>, PipelineError>,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    make_dirs(out, true)?;
    let mut scorers: Vec<Box<dyn Scorer>> = cfg.ensemble.connect()?;
    let mut images = Vec::with_capacity(manifest.images.len());
    let mut predictions = Vec::new();
    for (i, rec) in manifest.images.iter().enumerate() {
        let raster = load(manifest, base_dir, i)?;
        let stage1 = stage1_for(i, &raster)?;
        write_stage1(out, &rec.id, &stage1)?;
        let e = &cfg.ensemble;
        let classified = classify_candidates(
            &raster,
            &stage1,
            e.patch_size,
            e.batch_size,
            e.decision_threshold,
            &mut scorers,
        )
        .map_err(|source| PipelineError::Stage2 {
            image_id: rec.id.clone(),
            source,
        })?;
        let probs_path = out.join("probs").join(format!("{}.jsonl", image_file_stem(&rec.id)));
        write_file(&probs_path, &probs_bytes(&classified.candidates))?;
        predictions.extend(classified.kept.iter().map(|d| DetectionRecord::new(&rec.id, d)));
        images.push(ImageResult {
            image_id: rec.id.clone(),
            stage1,
            kept: classified.kept,
            candidates: classified.candidates,
        });
    }
    for s in &mut scorers {
        let name = s.name().to_string();
        s.finish().map_err(|source| EnsembleError::Scorer {
            scorer: name,
            batch: 0,
            source,
        })?;
    }

    let pred_path = out.join("predictions.jsonl");
    let file = File::create(&pred_path).map_err(io_err(&pred_path))?;
    let mut w = BufWriter::new(file);
    write_detections_jsonl(&predictions, &mut w).map_err(io_err(&pred_path))?;
    w.flush().map_err(io_err(&pred_path))?;

    let report = if manifest.annotations.is_empty() {
        None
    } else {
        let report = evaluate_run(&predictions, manifest, &cfg.eval)?;
        write_file(&out.join("report.json"), report.to_json().as_bytes())?;
        Some(report)
    };
    write_config(out, cfg)?;
    Ok(RunSummary {
        images,
        predictions,
        report,
    })
}

/// Both stages for every image, in manifest order.
pub fn run_pipeline(
    manifest: &DatasetManifest,
    base_dir: &Path,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let mut detector = Detector::connect(&cfg.detector, cfg.tile_size).map_err(PipelineError::Detector)?;
    let summary = stage2(manifest, base_dir, cfg, out, |i, raster| {
        run_stage1(raster, cfg, &mut detector).map_err(|source| PipelineError::Stage1 {
            image_id: manifest.images[i].id.clone(),
            source,
        })
    })?;
    detector.close().map_err(PipelineError::Detector)?;
    Ok(summary)
}

/// Stage 2 only, reading stage-1 detections persisted under `stage1_dir`.
pub fn run_classify(
    manifest: &DatasetManifest,
    base_dir: &Path,
    cfg: &PipelineConfig,
    stage1_dir: &Path,
    out: &Path,
) -> Result<RunSummary, PipelineError> {
    stage2(manifest, base_dir, cfg, out, |i, _| {
        read_stage1(stage1_dir, &manifest.images[i].id)
    })
}

/// Run `f` on a pool of `jobs` threads; `None` uses every logical core.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    match builder.build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ImageRecord;

    fn slide_dir() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let (raster, manifest) = gen_synthetic(&SyntheticSpec::default()).unwrap();
        raster.save(&dir.path().join(synthetic::SYNTHETIC_IMAGE_FILE)).unwrap();
        (dir, manifest)
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"tile":512}"#).is_err());
        let ext: PipelineConfig = serde_json::from_str(r#"{"detector":{"kind":"external","command":["d"]}}"#).unwrap();
        assert_eq!(
            ext.detector,
            DetectorSpec::External {
                command: vec!["d".into()]
            }
        );
        let blob: PipelineConfig = serde_json::from_str(r#"{"detector":{"kind":"blob","min_area":5}}"#).unwrap();
        assert!(matches!(
            blob.detector,
            DetectorSpec::Blob(BlobParams { min_area: 5, .. })
        ));
    }

    #[test]
    fn stage1_tiling_matches_whole_image() {
        let (raster, _) = gen_synthetic(&SyntheticSpec::default()).unwrap();
        let cfg = PipelineConfig::default();
        let tiled = run_stage1(&raster, &cfg, &mut Detector::Blob(BlobParams::default())).unwrap();
        let whole = crate::postprocess::nms(&blob_detect(&raster, &BlobParams::default()), cfg.nms_iou);
        let centers = |d: &[Detection]| {
            let mut c: Vec<_> = d.iter().map(|d| d.bbox.center().rounded()).collect();
            c.sort();
            c
        };
        assert_eq!(centers(&tiled), centers(&whole));
        assert_eq!(tiled.len(), 15);
    }

    #[test]
    fn synthetic_fixture_is_perfect() {
        let (dir, manifest) = slide_dir();
        let out = dir.path().join("out");
        let summary = run_pipeline(&manifest, dir.path(), &PipelineConfig::default(), &out).unwrap();
        let pooled = summary.report.unwrap().pooled;
        assert_eq!((pooled.tp, pooled.fp, pooled.fn_), (10, 0, 0));
        for f in [
            "predictions.jsonl",
            "report.json",
            "run_config.json",
            "stage1/synthetic.jsonl",
            "probs/synthetic.jsonl",
        ] {
            assert!(out.join(f).is_file(), "{f}");
        }
    }

    #[test]
    fn high_threshold_drops_everything() {
        let (dir, manifest) = slide_dir();
        let mut cfg = PipelineConfig::default();
        cfg.ensemble.decision_threshold = 0.99;
        let summary = run_pipeline(&manifest, dir.path(), &cfg, &dir.path().join("out")).unwrap();
        assert!(summary.predictions.is_empty());
        assert_eq!(summary.report.unwrap().pooled.recall, 0.0);
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            name: "empty".into(),
            images: Vec::new(),
            annotations: Vec::new(),
        };
        let s = run_pipeline(&m, dir.path(), &PipelineConfig::default(), dir.path()).unwrap();
        assert!(s.predictions.is_empty() && s.report.is_none());
        assert_eq!(fs::read(dir.path().join("predictions.jsonl")).unwrap(), b"");
    }

    #[test]
    fn missing_image_is_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            name: "m".into(),
            images: vec![ImageRecord {
                id: "gone".into(),
                path: "gone.png".into(),
                width: 10,
                height: 10,
                microns_per_pixel: 0.25,
            }],
            annotations: Vec::new(),
        };
        let err = run_pipeline(&m, dir.path(), &PipelineConfig::default(), dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Image { ref image_id, .. } if image_id == "gone"));
        assert!(!err.is_protocol());
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(image_file_stem("roi/7 a"), "roi_7_a");
        assert_eq!(image_file_stem("a-1.b_2"), "a-1.b_2");
    }
}
