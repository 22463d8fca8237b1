//! Training-side numerics as pure functions: classification losses and their
//! logit gradients, knowledge distillation, parameter EMA, learning-rate
//! schedules and early stopping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrainMathError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("logits must be finite and non-empty")]
    BadLogits,
    #[error("temperature must be > 0, got {0}")]
    BadTemperature(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("epoch {epoch} outside 0..{total}")]
    EpochOutOfRange { epoch: usize, total: usize },
}

fn check_logits(z: &[f64]) -> Result<(), TrainMathError> {
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(TrainMathError::BadLogits);
    }
    Ok(())
}

fn check_label(z: &[f64], label: usize) -> Result<(), TrainMathError> {
    if label >= z.len() {
        return Err(TrainMathError::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    Ok(())
}

/// `log softmax(z / t)` with max subtraction.
pub fn log_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>, TrainMathError> {
    check_logits(z)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TrainMathError::BadTemperature(temperature));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(scaled.iter().map(|v| v - lse).collect())
}

pub fn softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>, TrainMathError> {
    check_logits(z)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(TrainMathError::BadTemperature(temperature));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, TrainMathError> {
    check_logits(logits)?;
    check_label(logits, label)?;
    Ok((-log_softmax(logits, 1.0)?[label]).max(0.0))
}

/// `∂CE/∂z = softmax(z) − onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>, TrainMathError> {
    check_label(logits, label)?;
    let mut g = softmax(logits, 1.0)?;
    g[label] -= 1.0;
    Ok(g)
}

/// `α·(1−p)^γ·(−log p)` for the label's probability `p`.
pub fn focal_loss(logits: &[f64], label: usize, gamma: f64, alpha: f64) -> Result<f64, TrainMathError> {
    check_focal(gamma, alpha)?;
    check_label(logits, label)?;
    let logp = log_softmax(logits, 1.0)?[label];
    let p = logp.exp();
    Ok(alpha * (1.0 - p).powf(gamma) * -logp)
}

fn check_focal(gamma: f64, alpha: f64) -> Result<(), TrainMathError> {
    if !(gamma >= 0.0) {
        return Err(TrainMathError::OutOfRange {
            name: "gamma",
            value: gamma,
        });
    }
    if !(alpha > 0.0) {
        return Err(TrainMathError::OutOfRange {
            name: "alpha",
            value: alpha,
        });
    }
    Ok(())
}

pub fn focal_loss_grad(logits: &[f64], label: usize, gamma: f64, alpha: f64) -> Result<Vec<f64>, TrainMathError> {
    check_focal(gamma, alpha)?;
    check_label(logits, label)?;
    let probs = softmax(logits, 1.0)?;
    let logp = log_softmax(logits, 1.0)?[label];
    let p = probs[label];
    let q = 1.0 - p;
    // dL/dp = α·[γ(1−p)^(γ−1)·log p − (1−p)^γ / p], and dp/dz_j = p(δ_j − p_j)
    let dl_dp = alpha
        * (if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * logp
        } - q.powf(gamma) / p);
    Ok(probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| dl_dp * p * (if j == label { 1.0 } else { 0.0 } - pj))
        .collect())
}

/// `Σ q·(log q − log p)` from log-probabilities.
fn kl_from_logs(log_q: &[f64], log_p: &[f64]) -> f64 {
    log_q.iter().zip(log_p).map(|(lq, lp)| lq.exp() * (lq - lp)).sum()
}

fn check_kd(student: &[f64], teacher: &[f64], temperature: f64, ratio: f64) -> Result<(), TrainMathError> {
    if student.len() != teacher.len() {
        return Err(TrainMathError::LengthMismatch(student.len(), teacher.len()));
    }
    if !(temperature > 0.0) {
        return Err(TrainMathError::BadTemperature(temperature));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TrainMathError::OutOfRange {
            name: "ratio",
            value: ratio,
        });
    }
    Ok(())
}

/// `ratio·CE(student, label) + (1−ratio)·T²·KL(softmax(teacher/T) ‖ softmax(student/T))`.
pub fn kd_loss(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    temperature: f64,
    ratio: f64,
) -> Result<f64, TrainMathError> {
    check_kd(student, teacher, temperature, ratio)?;
    let ce = cross_entropy(student, label)?;
    let log_p = log_softmax(student, temperature)?;
    let log_q = log_softmax(teacher, temperature)?;
    let kl = kl_from_logs(&log_q, &log_p).max(0.0);
    Ok(ratio * ce + (1.0 - ratio) * temperature * temperature * kl)
}

/// Gradient of [`kd_loss`] with respect to the student logits:
/// `ratio·(softmax(s) − onehot) + (1−ratio)·T·(softmax(s/T) − softmax(t/T))`.
pub fn kd_loss_grad(
    student: &[f64],
    teacher: &[f64],
    label: usize,
    temperature: f64,
    ratio: f64,
) -> Result<Vec<f64>, TrainMathError> {
    check_kd(student, teacher, temperature, ratio)?;
    let ce = cross_entropy_grad(student, label)?;
    let p = softmax(student, temperature)?;
    let q = softmax(teacher, temperature)?;
    Ok((0..student.len())
        .map(|j| ratio * ce[j] + (1.0 - ratio) * temperature * (p[j] - q[j]))
        .collect())
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9998;

pub fn ema_update(ema: &[f64], params: &[f64], decay: f64) -> Result<Vec<f64>, TrainMathError> {
    if ema.len() != params.len() {
        return Err(TrainMathError::LengthMismatch(ema.len(), params.len()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(TrainMathError::OutOfRange {
            name: "decay",
            value: decay,
        });
    }
    Ok(ema
        .iter()
        .zip(params)
        .map(|(e, p)| decay * e + (1.0 - decay) * p)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauMode {
    Min,
    Max,
}

/// Reduce-on-plateau scheduler state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best_metric: f64,
    pub epochs_since_improve: usize,
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub mode: PlateauMode,
    pub min_delta: f64,
}

impl PlateauState {
    /// factor 0.1, patience 5, min_delta 1e-4, minimizing.
    pub fn new(lr: f64) -> Self {
        Self::with(lr, PlateauMode::Min, 5, 0.1, 1e-4)
    }

    pub fn with(lr: f64, mode: PlateauMode, patience: usize, factor: f64, min_delta: f64) -> Self {
        Self {
            best_metric: match mode {
                PlateauMode::Min => f64::INFINITY,
                PlateauMode::Max => f64::NEG_INFINITY,
            },
            epochs_since_improve: 0,
            lr,
            patience,
            factor,
            mode,
            min_delta,
        }
    }
}

pub fn plateau_step(state: &PlateauState, metric: f64) -> PlateauState {
    let mut s = *state;
    let improved = match s.mode {
        PlateauMode::Min => metric < s.best_metric - s.min_delta,
        PlateauMode::Max => metric > s.best_metric + s.min_delta,
    };
    if improved {
        s.best_metric = metric;
        s.epochs_since_improve = 0;
    } else {
        s.epochs_since_improve += 1;
        if s.epochs_since_improve > s.patience {
            s.lr *= s.factor;
            s.epochs_since_improve = 0;
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmupSpec {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Default for CosineWarmupSpec {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            warmup_epochs: 5,
            total_epochs: 50,
        }
    }
}

/// Linear warmup from `base/warmup` to `base`, then half-cosine decay that
/// reaches 0 on the final epoch: `t = (epoch − warmup) / (total − warmup − 1)`.
pub fn cosine_warmup_lr(epoch: usize, spec: &CosineWarmupSpec) -> Result<f64, TrainMathError> {
    if epoch >= spec.total_epochs {
        return Err(TrainMathError::EpochOutOfRange {
            epoch,
            total: spec.total_epochs,
        });
    }
    if spec.warmup_epochs >= spec.total_epochs || !(spec.base_lr > 0.0) {
        return Err(TrainMathError::OutOfRange {
            name: "warmup_epochs",
            value: spec.warmup_epochs as f64,
        });
    }
    if epoch < spec.warmup_epochs {
        return Ok(spec.base_lr * (epoch + 1) as f64 / spec.warmup_epochs as f64);
    }
    let span = (spec.total_epochs - spec.warmup_epochs - 1).max(1) as f64;
    let t = (epoch - spec.warmup_epochs) as f64 / span;
    Ok(spec.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// The whole schedule as `epoch,lr` CSV with a header line.
pub fn schedule_csv(spec: &CosineWarmupSpec) -> Result<String, TrainMathError> {
    let mut out = String::from("epoch,lr\n");
    for e in 0..spec.total_epochs {
        out.push_str(&format!("{e},{}\n", cosine_warmup_lr(e, spec)?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_f1: f64,
    pub epochs_since_improve: usize,
    pub patience: usize,
    pub stopped: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best_f1: 0.0,
            epochs_since_improve: 0,
            patience,
            stopped: false,
        }
    }
}

pub fn early_stop_step(state: &EarlyStopState, f1: f64) -> Result<EarlyStopState, TrainMathError> {
    if !(0.0..=1.0).contains(&f1) {
        return Err(TrainMathError::OutOfRange { name: "f1", value: f1 });
    }
    let mut s = *state;
    if s.stopped {
        return Ok(s);
    }
    if f1 > s.best_f1 {
        s.best_f1 = f1;
        s.epochs_since_improve = 0;
    } else {
        s.epochs_since_improve += 1;
    }
    s.stopped = s.epochs_since_improve > s.patience;
    Ok(s)
}
