//! Stage 2: candidate patches around stage-1 detections are scored by one or
//! more classifiers, their softmax outputs averaged, and detections whose
//! mean mitotic probability clears the threshold are kept.

pub mod conformance;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point;
use crate::postprocess::Detection;
use crate::protocol::{encode_patch, Channel, Handler, Message, ProtocolError};
use crate::raster::{PadPolicy, Patch, Raster, RasterError};
use crate::trainmath::{self, TrainMathError};

pub const DEFAULT_PATCH_SIZE: usize = 128;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Largest `|Σp − 1|` a scorer reply may have and still be renormalized.
pub const RENORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("probabilities {0:?} are not on the 2-class simplex")]
    NotOnSimplex([f64; 2]),
    #[error("expected 2 logits, got {0}")]
    NotBinary(usize),
    #[error("cannot average an empty list of probabilities")]
    Empty,
    #[error(transparent)]
    Softmax(#[from] TrainMathError),
    #[error("decision threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("an ensemble needs at least one scorer")]
    NoScorers,
    #[error("patch size and batch size must be >= 1")]
    BadSize,
    #[error("scorer {scorer:?}, batch {batch}: {source}")]
    Scorer {
        scorer: String,
        batch: usize,
        #[source]
        source: ProtocolError,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl EnsembleError {
    pub fn is_protocol(&self) -> bool {
        matches!(self, EnsembleError::Scorer { .. })
    }
}

/// `[non-mitotic, mitotic]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct ClassProbs([f64; 2]);

impl ClassProbs {
    pub fn new(p: [f64; 2]) -> Result<Self, EnsembleError> {
        let on_simplex = p.iter().all(|v| (0.0..=1.0).contains(v)) && (p[0] + p[1] - 1.0).abs() <= SIMPLEX_TOL;
        if on_simplex {
            Ok(Self(p))
        } else {
            Err(EnsembleError::NotOnSimplex(p))
        }
    }

    pub fn non_mitotic(&self) -> f64 {
        self.0[0]
    }

    pub fn mitotic(&self) -> f64 {
        self.0[1]
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.0
    }
}

impl TryFrom<[f64; 2]> for ClassProbs {
    type Error = EnsembleError;
    fn try_from(p: [f64; 2]) -> Result<Self, Self::Error> {
        Self::new(p)
    }
}

impl From<ClassProbs> for [f64; 2] {
    fn from(p: ClassProbs) -> Self {
        p.0
    }
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<ClassProbs, EnsembleError> {
    if logits.len() != 2 {
        return Err(EnsembleError::NotBinary(logits.len()));
    }
    let p = trainmath::softmax(logits, temperature)?;
    Ok(ClassProbs([p[0], p[1]]))
}

pub fn average_probs(probs: &[ClassProbs]) -> Result<ClassProbs, EnsembleError> {
    if probs.is_empty() {
        return Err(EnsembleError::Empty);
    }
    // identical votes average to themselves exactly
    if probs.iter().all(|p| p == &probs[0]) {
        return Ok(probs[0]);
    }
    let n = probs.len() as f64;
    let p0 = probs.iter().map(|p| p.0[0]).sum::<f64>() / n;
    let p1 = probs.iter().map(|p| p.0[1]).sum::<f64>() / n;
    Ok(ClassProbs([p0, p1]))
}

/// Validate a raw scorer reply, renormalizing small deviations from Σ = 1.
pub fn check_probs(raw: &[f64]) -> Result<ClassProbs, ProtocolError> {
    let bad = || ProtocolError::BadProbs(raw.to_vec());
    let [a, b] = <[f64; 2]>::try_from(raw).map_err(|_| bad())?;
    if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) {
        return Err(bad());
    }
    let sum = a + b;
    if (sum - 1.0).abs() > RENORM_TOL {
        return Err(bad());
    }
    let p = [a / sum, b / sum];
    ClassProbs::new(p).map_err(|_| bad())
}

/// Dark patches score as mitotic: `m` is the mean byte over all channels
/// divided by 255 and the result is `[m, 1 − m]`.
pub fn mock_intensity_score(patch: &Patch) -> ClassProbs {
    let bytes = patch.as_bytes();
    let sum: u64 = bytes.iter().map(|&b| b as u64).sum();
    let m = if bytes.is_empty() {
        0.0
    } else {
        sum as f64 / (bytes.len() as f64 * 255.0)
    };
    ClassProbs([m, 1.0 - m])
}

/// `size`×`size` patch centered on the box center (rounded half-up), with
/// reflected borders.
pub fn extract_candidate_patch(raster: &Raster, det: &Detection, size: usize) -> Result<Patch, RasterError> {
    raster.extract(candidate_origin(det.bbox.center(), size), size, PadPolicy::Reflect)
}

pub fn candidate_origin(center: Point, size: usize) -> (i64, i64) {
    let (cx, cy) = center.rounded();
    let half = (size / 2) as i64;
    (cx - half, cy - half)
}

pub trait Scorer: Send {
    fn name(&self) -> &str;
    /// One probability vector per patch, in order.
    fn score_batch(&mut self, patches: &[Patch]) -> Result<Vec<ClassProbs>, ProtocolError>;
    /// End the session; external scorers send `bye` here.
    fn finish(&mut self) -> Result<(), ProtocolError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockIntensity;

impl Scorer for MockIntensity {
    fn name(&self) -> &str {
        "mock-intensity"
    }

    fn score_batch(&mut self, patches: &[Patch]) -> Result<Vec<ClassProbs>, ProtocolError> {
        Ok(patches.iter().map(mock_intensity_score).collect())
    }
}

/// Serves [`mock_intensity_score`] over the wire protocol.
impl Handler for MockIntensity {
    fn name(&self) -> &str {
        "mock-intensity"
    }

    fn score(&mut self, patches: &[Patch]) -> Result<Vec<[f64; 2]>, String> {
        Ok(patches.iter().map(|p| mock_intensity_score(p).as_array()).collect())
    }
}

/// A scorer reached over the wire protocol.
#[derive(Debug)]
pub struct ExternalScorer {
    channel: Channel,
}

impl ExternalScorer {
    pub fn new(channel: Channel) -> Self {
        Self { channel }
    }

    pub fn spawn(command: &[String], patch_size: usize) -> Result<Self, ProtocolError> {
        Ok(Self::new(Channel::spawn(command, patch_size)?))
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    pub fn close(mut self) -> Result<(), ProtocolError> {
        self.channel.close()
    }
}

impl Scorer for ExternalScorer {
    fn name(&self) -> &str {
        self.channel.name()
    }

    fn score_batch(&mut self, patches: &[Patch]) -> Result<Vec<ClassProbs>, ProtocolError> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let encoded: Vec<String> = patches.par_iter().map(encode_patch).collect();
        let reply = self.channel.request(|id| Message::Score { id, patches: encoded })?;
        let Message::Probs { probs, .. } = reply else {
            return Err(ProtocolError::Unexpected {
                expected: "probs",
                got: reply.kind().into(),
            });
        };
        if probs.len() != patches.len() {
            return Err(ProtocolError::CountMismatch {
                expected: patches.len(),
                got: probs.len(),
            });
        }
        probs.iter().map(|p| check_probs(p)).collect()
    }

    fn finish(&mut self) -> Result<(), ProtocolError> {
        self.channel.close()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    MockIntensity,
    /// `command[0]` is started with the remaining arguments.
    External {
        command: Vec<String>,
    },
}

impl ScorerSpec {
    pub fn connect(&self, patch_size: usize) -> Result<Box<dyn Scorer>, EnsembleError> {
        match self {
            ScorerSpec::MockIntensity => Ok(Box::new(MockIntensity)),
            ScorerSpec::External { command } => ExternalScorer::spawn(command, patch_size)
                .map(|s| Box::new(s) as Box<dyn Scorer>)
                .map_err(|source| EnsembleError::Scorer {
                    scorer: command.join(" "),
                    batch: 0,
                    source,
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_threshold")]
    pub decision_threshold: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_scorers")]
    pub scorers: Vec<ScorerSpec>,
}

fn default_patch_size() -> usize {
    DEFAULT_PATCH_SIZE
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_scorers() -> Vec<ScorerSpec> {
    vec![ScorerSpec::MockIntensity]
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            decision_threshold: DEFAULT_THRESHOLD,
            batch_size: DEFAULT_BATCH_SIZE,
            scorers: default_scorers(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(EnsembleError::BadThreshold(self.decision_threshold));
        }
        if self.scorers.is_empty() {
            return Err(EnsembleError::NoScorers);
        }
        if self.patch_size == 0 || self.batch_size == 0 {
            return Err(EnsembleError::BadSize);
        }
        Ok(())
    }

    pub fn connect(&self) -> Result<Vec<Box<dyn Scorer>>, EnsembleError> {
        self.scorers.iter().map(|s| s.connect(self.patch_size)).collect()
    }
}

/// Per-candidate record of what every scorer said.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateProbs {
    pub index: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub stage1_score: f64,
    pub per_scorer: Vec<ClassProbs>,
    pub mean: ClassProbs,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classified {
    pub kept: Vec<Detection>,
    pub candidates: Vec<CandidateProbs>,
}

/// Score every detection with every scorer and keep those whose mean
/// mitotic probability is at least `threshold`; kept detections take that
/// mean as their score.
pub fn classify_candidates(
    raster: &Raster,
    dets: &[Detection],
    patch_size: usize,
    batch_size: usize,
    threshold: f64,
    scorers: &mut [Box<dyn Scorer>],
) -> Result<Classified, EnsembleError> {
    if scorers.is_empty() {
        return Err(EnsembleError::NoScorers);
    }
    if patch_size == 0 || batch_size == 0 {
        return Err(EnsembleError::BadSize);
    }
    let patches: Vec<Patch> = dets
        .par_iter()
        .map(|d| extract_candidate_patch(raster, d, patch_size))
        .collect::<Result<_, _>>()?;

    let per_scorer: Vec<Vec<ClassProbs>> = scorers
        .par_iter_mut()
        .map(|scorer| {
            let mut out = Vec::with_capacity(patches.len());
            for (batch, chunk) in patches.chunks(batch_size).enumerate() {
                let probs = scorer.score_batch(chunk).map_err(|source| EnsembleError::Scorer {
                    scorer: scorer.name().to_string(),
                    batch,
                    source,
                })?;
                if probs.len() != chunk.len() {
                    return Err(EnsembleError::Scorer {
                        scorer: scorer.name().to_string(),
                        batch,
                        source: ProtocolError::CountMismatch {
                            expected: chunk.len(),
                            got: probs.len(),
                        },
                    });
                }
                out.extend(probs);
            }
            Ok(out)
        })
        .collect::<Result<_, EnsembleError>>()?;

    let mut kept = Vec::new();
    let mut candidates = Vec::with_capacity(dets.len());
    for (i, det) in dets.iter().enumerate() {
        let votes: Vec<ClassProbs> = per_scorer.iter().map(|s| s[i]).collect();
        let mean = average_probs(&votes)?;
        let keep = mean.mitotic() >= threshold;
        if keep {
            kept.push(Detection {
                score: mean.mitotic(),
                ..*det
            });
        }
        candidates.push(CandidateProbs {
            index: i,
            x0: det.bbox.x0,
            y0: det.bbox.y0,
            x1: det.bbox.x1,
            y1: det.bbox.y1,
            stage1_score: det.score,
            per_scorer: votes,
            mean,
            kept: keep,
        });
    }
    Ok(Classified { kept, candidates })
}
