//! `mitopipe`: the detection pipeline from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 scorer or detector
//! protocol error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mitopipe::ensemble::EnsembleError;
use mitopipe::pipeline::DetectorError;
use mitopipe::{MatchStrategy, PipelineError, ProtocolError, PROTOCOL_VERSION, VERSION};

fn long_version() -> &'static str {
    Box::leak(format!("{VERSION} (protocol {PROTOCOL_VERSION})").into_boxed_str())
}

#[derive(Debug, Parser)]
#[command(name = "mitopipe", version = long_version(), about = "Two-stage mitotic-figure detection")]
pub struct Cli {
    /// Print errors as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Worker threads; defaults to every logical core. `--jobs 1` is serial.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a COCO-style annotation file into a manifest.
    ImportCoco(ImportCocoArgs),
    /// Check a manifest and print its class counts.
    Validate(ValidateArgs),
    /// Render a synthetic slide and its manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Plan training patches.
    SamplePlan(SamplePlanArgs),
    /// Write augmented patches for a patch plan.
    AugmentPreview(AugmentPreviewArgs),
    /// Fit a LAB stain profile over every image of a manifest.
    FitStainProfile(FitStainProfileArgs),
    /// Stage 1 only.
    Detect(PipelineArgs),
    /// Stage 2 only, over stage-1 output from `detect`.
    Classify(ClassifyArgs),
    /// Both stages, then evaluation when the manifest has annotations.
    Run(PipelineArgs),
    /// Score predictions against a manifest.
    Evaluate(EvaluateArgs),
    /// Print the learning-rate schedule as CSV.
    ScheduleDump(ScheduleArgs),
    /// Check an external scorer against a generated fixture.
    Conformance(ConformanceArgs),
    #[command(hide = true)]
    ServeMockScorer(ServeMockScorerArgs),
    #[command(hide = true)]
    ServeMockDetector(ServeMockDetectorArgs),
}

#[derive(Debug, Args)]
pub struct ImportCocoArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub mpp: Option<f64>,
    /// `ID=mitotic` or `ID=imposter`; replaces the default 1=mitotic, 2=imposter.
    #[arg(long = "category")]
    pub categories: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Standard,
    Adversarial,
}

#[derive(Debug, Args)]
pub struct GenSyntheticArgs {
    /// Directory receiving the image and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "standard")]
    pub preset: PresetArg,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub mitoses: Option<usize>,
    #[arg(long)]
    pub imposters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SamplePlanArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub count: Option<usize>,
    /// Run configuration whose `[sampling]` section supplies the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Foreground, random and imposter weights, e.g. `5 1 4`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratio: Option<Vec<f64>>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub jitter: Option<u32>,
    /// JSON-lines output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentPreviewArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Plans written by `sample-plan`.
    #[arg(long)]
    pub plans: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Stain profile from `fit-stain-profile`; stain transfer is off without one.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Run configuration whose `[augment]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Only the first N plans.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitStainProfileArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// TOML or JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's `manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// External scorer command line; repeat for an ensemble. Replaces the
    /// configured scorers.
    #[arg(long = "scorer-cmd")]
    pub scorer_cmds: Vec<String>,
    /// Add N in-process intensity scorers next to any `--scorer-cmd`.
    #[arg(long)]
    pub mock_scorers: Option<usize>,
    /// External detector command line.
    #[arg(long)]
    pub detector_cmd: Option<String>,
    #[arg(long, conflicts_with = "radius_um")]
    pub radius_px: Option<f64>,
    #[arg(long)]
    pub radius_um: Option<f64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// The `stage1/` directory written by `detect`.
    #[arg(long)]
    pub stage1: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Hungarian,
}

impl From<StrategyArg> for MatchStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Greedy => MatchStrategy::GreedyByDistance,
            StrategyArg::Hungarian => MatchStrategy::HungarianOracle,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, conflicts_with = "radius_um")]
    pub radius_px: Option<f64>,
    #[arg(long)]
    pub radius_um: Option<f64>,
    #[arg(long, value_enum, default_value = "greedy")]
    pub strategy: StrategyArg,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub total: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConformanceArgs {
    /// Scorer command line. `{fixture}` is replaced with the path of the
    /// generated echo fixture.
    #[arg(long)]
    pub scorer_cmd: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = mitopipe::ensemble::DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    /// Where to write the fixture; a temporary directory when omitted.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Misbehave {
    /// Reply with probabilities off the simplex.
    BadProbs,
    /// Reply with one vector too few.
    ShortReply,
    /// Exit right after the handshake.
    Hangup,
}

#[derive(Debug, Args)]
pub struct ServeMockScorerArgs {
    /// Answer from an echo fixture instead of mean intensity.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub misbehave: Option<Misbehave>,
}

#[derive(Debug, Args)]
pub struct ServeMockDetectorArgs {
    #[arg(long)]
    pub intensity_threshold: Option<f64>,
}

/// Bad flags or configuration, as opposed to bad data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A peer that completed the session but answered wrongly.
#[derive(Debug)]
pub struct NonConforming(pub String);

impl std::fmt::Display for NonConforming {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NonConforming {}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_PROTOCOL: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    let protocol = err.chain().any(|e| {
        e.downcast_ref::<PipelineError>()
            .is_some_and(PipelineError::is_protocol)
            || e.downcast_ref::<EnsembleError>()
                .is_some_and(EnsembleError::is_protocol)
            || e.is::<ProtocolError>()
            || e.is::<NonConforming>()
            || e.downcast_ref::<DetectorError>()
                .is_some_and(|d| matches!(d, DetectorError::Protocol(_)))
    });
    if protocol {
        EXIT_PROTOCOL
    } else if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

/// The error chain on one line. Library errors often repeat their source in
/// their own message, so causes already spelled out are skipped.
fn render(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for e in err.chain() {
        let text = e.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn report(err: &anyhow::Error, code: u8, json: bool) {
    if json {
        let kind = match code {
            EXIT_USAGE => "usage",
            EXIT_PROTOCOL => "protocol",
            _ => "data",
        };
        let causes: Vec<String> = err.chain().map(|e| e.to_string()).collect();
        let obj = serde_json::json!({
            "error": err.to_string(),
            "kind": kind,
            "exit_code": code,
            "causes": causes,
        });
        eprintln!("{obj}");
    } else {
        eprintln!("error: {}", render(err));
    }
}

fn main() -> ExitCode {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            if json_errors && code != 0 {
                let obj = serde_json::json!({
                    "error": e.kind().to_string(),
                    "kind": "usage",
                    "exit_code": code,
                    "causes": [e.to_string()],
                });
                eprintln!("{obj}");
            } else {
                let _ = e.print();
            }
            return ExitCode::from(code);
        }
    };
    let jobs = cli.jobs.map(|n| n as usize);
    let json = cli.json_errors;
    match mitopipe::pipeline::with_jobs(jobs, move || commands::dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            report(&err, code, json);
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn protocol_errors_map_to_three() {
        let err = anyhow::Error::new(PipelineError::Detector(ProtocolError::Closed));
        assert_eq!(exit_code(&err), EXIT_PROTOCOL);
        let err = anyhow::Error::new(UsageError("x".into()));
        assert_eq!(exit_code(&err), EXIT_USAGE);
        let err = anyhow::anyhow!("bad data");
        assert_eq!(exit_code(&err), EXIT_DATA);
    }

    #[test]
    fn render_skips_repeated_causes() {
        use anyhow::Context;
        let err = Err::<(), _>(PipelineError::Detector(ProtocolError::Closed))
            .context("running")
            .unwrap_err();
        assert_eq!(render(&err), "running: detector: peer closed the channel");
    }
}
