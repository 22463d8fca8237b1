//! Two-stage mitotic-figure detection pipeline.
//!
//! Stage 1 proposes boxes on overlapping slide tiles ([`pipeline`],
//! [`postprocess`]); stage 2 crops candidate patches, averages class
//! probabilities from one or more scorers and keeps the mitotic ones
//! ([`ensemble`]). [`eval`] scores predictions against annotated manifests.
//! Training-time pieces live in [`sampler`], [`augment`] and [`trainmath`].

pub mod augment;
pub mod ensemble;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod pipeline;
pub mod postprocess;
pub mod protocol;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod trainmath;

pub use augment::{AugmentConfig, AugmentError, D4Element, StainProfile, TemplateStats};
pub use ensemble::{ClassProbs, EnsembleConfig, EnsembleError, ExternalScorer, MockIntensity, Scorer, ScorerSpec};
pub use eval::{EvalError, EvalReport, MatchConfig, MatchResult, MatchStrategy, Metrics, Radius};
pub use geometry::{BBox, Point};
pub use ingest::{
    Annotation, ClassCounts, DatasetManifest, ImageLoadError, ImageRecord, Label, ManifestError, ValidationIssue,
};
pub use pipeline::{BlobParams, DetectorSpec, PipelineConfig, PipelineError, RunSummary, SyntheticSpec};
pub use postprocess::{Detection, DetectionRecord, PostprocessError};
pub use protocol::{ProtocolError, PROTOCOL_VERSION};
pub use raster::{PadPolicy, Patch, Raster, RasterError};
pub use rng::PipelineRng;
pub use sampler::{PatchKind, PatchPlan, SamplingError, SamplingSpec};
pub use trainmath::{CosineWarmupSpec, EarlyStopState, PlateauState, TrainMathError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
