use std::collections::hash_map::RandomState;
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::hash::{BuildHasher, Hasher};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mitopipe::augment::{augment_pipeline, fit_stain_profile, AppliedAugment};
use mitopipe::ensemble::conformance::{build_fixture, run_conformance, EchoFixture};
use mitopipe::ingest::coco::{import_coco, CocoImportOptions};
use mitopipe::ingest::{class_counts, load_image, read_manifest, validate};
use mitopipe::pipeline::synthetic::SYNTHETIC_IMAGE_FILE;
use mitopipe::pipeline::{gen_synthetic, run_classify, run_detect, run_pipeline};
use mitopipe::postprocess::read_detections_jsonl;
use mitopipe::protocol::{serve, Handler};
use mitopipe::rng::substream;
use mitopipe::sampler::{extract_patch, plan_samples, read_plans_jsonl, write_plans_jsonl};
use mitopipe::trainmath::schedule_csv;
use mitopipe::{
    BlobParams, CosineWarmupSpec, DatasetManifest, DetectorSpec, ExternalScorer, Label, MatchConfig, MockIntensity,
    PadPolicy, Patch, PipelineConfig, Radius, Raster, ScorerSpec, StainProfile, SyntheticSpec,
};
use serde::Serialize;

use crate::config::{self, LoadedConfig};
use crate::{
    AugmentPreviewArgs, ClassifyArgs, Command, ConformanceArgs, EvaluateArgs, FitStainProfileArgs, GenSyntheticArgs,
    ImportCocoArgs, Misbehave, NonConforming, PipelineArgs, PresetArg, SamplePlanArgs, ScheduleArgs,
    ServeMockDetectorArgs, ServeMockScorerArgs, UsageError, ValidateArgs,
};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::ImportCoco(a) => import_coco_cmd(a),
        Command::Validate(a) => validate_cmd(a),
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
        Command::SamplePlan(a) => sample_plan_cmd(a),
        Command::AugmentPreview(a) => augment_preview_cmd(a),
        Command::FitStainProfile(a) => fit_stain_profile_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::ScheduleDump(a) => schedule_cmd(a),
        Command::Conformance(a) => conformance_cmd(a),
        Command::ServeMockScorer(a) => serve_mock_scorer(a),
        Command::ServeMockDetector(a) => serve_mock_detector(a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_or_stdout(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => write_out(p, bytes),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Read a manifest and refuse it when validation finds anything.
fn checked_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = read_manifest(path).with_context(|| format!("manifest {}", path.display()))?;
    let issues = validate(&m);
    if !issues.is_empty() {
        for i in &issues {
            eprintln!("{}: {i}", path.display());
        }
        bail!("{}: {} validation issue(s)", path.display(), issues.len());
    }
    Ok(m)
}

fn split_command(cmd: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    if parts.is_empty() {
        return Err(usage("empty command line"));
    }
    Ok(parts)
}

fn load_config(path: Option<&Path>) -> Result<Option<LoadedConfig>> {
    path.map(|p| config::load(p).map_err(|e| usage(format!("{e:#}"))))
        .transpose()
}

fn import_coco_cmd(a: ImportCocoArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut opts = CocoImportOptions::default();
    if let Some(name) = a.name {
        opts.name = name;
    }
    if let Some(mpp) = a.mpp {
        opts.microns_per_pixel = mpp;
    }
    if !a.categories.is_empty() {
        opts.category_map = BTreeMap::new();
        for c in &a.categories {
            let (id, label) = c
                .split_once('=')
                .ok_or_else(|| usage(format!("--category expects ID=LABEL, got {c:?}")))?;
            let id: i64 = id
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad category id in {c:?}")))?;
            let label: Label = serde_json::from_value(serde_json::Value::String(label.trim().to_lowercase()))
                .map_err(|_| usage(format!("label in {c:?} must be mitotic or imposter")))?;
            opts.category_map.insert(id, label);
        }
    }
    let (manifest, summary) = import_coco(&text, &opts).with_context(|| format!("importing {}", a.input.display()))?;
    write_out(&a.out, manifest.to_json().as_bytes())?;
    eprintln!(
        "imported {} image(s), {} annotation(s)",
        summary.images, summary.annotations
    );
    for (cat, n) in &summary.skipped_unmapped {
        eprintln!("skipped {n} annotation(s) of unmapped category {cat}");
    }
    Ok(())
}

fn validate_cmd(a: ValidateArgs) -> Result<()> {
    let m = read_manifest(&a.manifest).with_context(|| format!("manifest {}", a.manifest.display()))?;
    let issues = validate(&m);
    for i in &issues {
        eprintln!("{i}");
    }
    print_json(&class_counts(&m))?;
    if !issues.is_empty() {
        bail!("{} validation issue(s)", issues.len());
    }
    Ok(())
}

fn gen_synthetic_cmd(a: GenSyntheticArgs) -> Result<()> {
    let mut spec = match a.preset {
        PresetArg::Standard => SyntheticSpec {
            seed: a.seed,
            ..Default::default()
        },
        PresetArg::Adversarial => SyntheticSpec::adversarial(a.seed),
    };
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    spec.n_mitoses = a.mitoses.unwrap_or(spec.n_mitoses);
    spec.n_imposters = a.imposters.unwrap_or(spec.n_imposters);
    let (raster, manifest) = gen_synthetic(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    raster.save(&a.out.join(SYNTHETIC_IMAGE_FILE))?;
    write_out(&a.out.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(())
}

fn sample_plan_cmd(a: SamplePlanArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut spec = cfg.map(|c| c.file.sampling).unwrap_or_default();
    spec.seed = a.seed;
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(r) = a.ratio {
        spec.ratio = [r[0], r[1], r[2]];
    }
    if let Some(p) = a.patch_size {
        spec.patch_size = p;
    }
    if a.jitter.is_some() {
        spec.jitter = a.jitter;
    }
    let manifest = checked_manifest(&a.manifest)?;
    let plans = plan_samples(&manifest, &spec)?;
    let mut buf = Vec::new();
    write_plans_jsonl(&plans, &mut buf)?;
    write_or_stdout(a.out.as_deref(), &buf)
}

#[derive(Serialize)]
struct PreviewRecord<'a> {
    index: usize,
    image_id: &'a str,
    x: i64,
    y: i64,
    file: String,
    applied: AppliedAugment,
}

fn augment_preview_cmd(a: AugmentPreviewArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut aug = cfg.map(|c| c.file.augment).unwrap_or_default();
    aug.validate().map_err(|e| usage(e.to_string()))?;
    let profile = match &a.profile {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(StainProfile::from_json(&text).with_context(|| format!("stain profile {}", p.display()))?)
        }
        None => {
            if aug.stain_p > 0.0 {
                eprintln!("no --profile given; stain transfer disabled");
            }
            aug.stain_p = 0.0;
            None
        }
    };
    let manifest = checked_manifest(&a.manifest)?;
    let base = base_dir(&a.manifest);
    let file = File::open(&a.plans).with_context(|| format!("opening {}", a.plans.display()))?;
    let mut plans = read_plans_jsonl(BufReader::new(file)).with_context(|| format!("plans {}", a.plans.display()))?;
    if let Some(n) = a.limit {
        plans.truncate(n);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut images: HashMap<String, Raster> = HashMap::new();
    let mut log = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        if !images.contains_key(&plan.image_id) {
            let rec = manifest
                .image(&plan.image_id)
                .ok_or_else(|| anyhow!("plan {i} refers to unknown image {:?}", plan.image_id))?;
            let raster = load_image(rec, &base).with_context(|| format!("image {}", rec.id))?;
            images.insert(plan.image_id.clone(), raster);
        }
        let patch: Patch = extract_patch(&images[&plan.image_id], plan.origin(), plan.size, PadPolicy::Reflect)?;
        let mut rng = substream(a.seed, i as u64);
        let (out, applied) = augment_pipeline(&patch, &aug, profile.as_ref(), &mut rng)?;
        let name = format!("{i:05}.png");
        out.save(&a.out.join(&name))?;
        serde_json::to_writer(
            &mut log,
            &PreviewRecord {
                index: i,
                image_id: &plan.image_id,
                x: plan.x,
                y: plan.y,
                file: name,
                applied,
            },
        )?;
        log.push(b'\n');
    }
    write_out(&a.out.join("augment.jsonl"), &log)
}

fn fit_stain_profile_cmd(a: FitStainProfileArgs) -> Result<()> {
    let manifest = checked_manifest(&a.manifest)?;
    let base = base_dir(&a.manifest);
    let rasters = manifest
        .images
        .iter()
        .map(|rec| load_image(rec, &base).with_context(|| format!("image {}", rec.id)))
        .collect::<Result<Vec<_>>>()?;
    let profile = fit_stain_profile(&rasters)?;
    write_out(&a.out, profile.to_json().as_bytes())
}

fn generated_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    h.write_u128(
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default(),
    );
    h.finish()
}

/// Config file, then flags. Returns the manifest path as well.
fn resolve_pipeline(a: &PipelineArgs) -> Result<(PipelineConfig, PathBuf)> {
    let loaded = load_config(a.config.as_deref())?;
    let (mut cfg, has_seed, manifest) = match loaded {
        Some(l) => (l.file.pipeline, l.has_seed, l.file.manifest),
        None => (PipelineConfig::default(), false, None),
    };
    let manifest = a
        .manifest
        .clone()
        .or(manifest)
        .ok_or_else(|| usage("no manifest: pass --manifest or set `manifest` in the config"))?;
    match a.seed {
        Some(s) => cfg.seed = s,
        None if has_seed => {}
        None => {
            cfg.seed = generated_seed();
            eprintln!("no seed given; using {} (recorded in run_config.json)", cfg.seed);
        }
    }
    if let Some(v) = a.tile_size {
        cfg.tile_size = v;
    }
    if let Some(v) = a.overlap {
        cfg.overlap = v;
    }
    if let Some(v) = a.nms_iou {
        cfg.nms_iou = v;
    }
    if let Some(v) = a.threshold {
        cfg.ensemble.decision_threshold = v;
    }
    if let Some(v) = a.patch_size {
        cfg.ensemble.patch_size = v;
    }
    if let Some(v) = a.batch_size {
        cfg.ensemble.batch_size = v;
    }
    if !a.scorer_cmds.is_empty() || a.mock_scorers.is_some() {
        let mut scorers = vec![ScorerSpec::MockIntensity; a.mock_scorers.unwrap_or(0)];
        for c in &a.scorer_cmds {
            scorers.push(ScorerSpec::External {
                command: split_command(c)?,
            });
        }
        cfg.ensemble.scorers = scorers;
    }
    if let Some(c) = &a.detector_cmd {
        cfg.detector = DetectorSpec::External {
            command: split_command(c)?,
        };
    }
    if let Some(px) = a.radius_px {
        cfg.eval.radius = Radius::Pixels(px);
    }
    if let Some(um) = a.radius_um {
        cfg.eval.radius = Radius::Microns(um);
    }
    if let Some(s) = a.strategy {
        cfg.eval.strategy = s.into();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((cfg, manifest))
}

#[derive(Serialize)]
struct RunOutput<'a> {
    images: usize,
    stage1: usize,
    predictions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pooled: Option<&'a mitopipe::Metrics>,
}

fn detect_cmd(a: PipelineArgs) -> Result<()> {
    let (cfg, manifest_path) = resolve_pipeline(&a)?;
    let manifest = checked_manifest(&manifest_path)?;
    let results = run_detect(&manifest, &base_dir(&manifest_path), &cfg, &a.out)?;
    print_json(&RunOutput {
        images: results.len(),
        stage1: results.iter().map(|r| r.stage1.len()).sum(),
        predictions: 0,
        pooled: None,
    })
}

fn summarize(s: &mitopipe::RunSummary) -> Result<()> {
    print_json(&RunOutput {
        images: s.images.len(),
        stage1: s.images.iter().map(|r| r.stage1.len()).sum(),
        predictions: s.predictions.len(),
        pooled: s.report.as_ref().map(|r| &r.pooled),
    })
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let (cfg, manifest_path) = resolve_pipeline(&a.pipeline)?;
    let manifest = checked_manifest(&manifest_path)?;
    let s = run_classify(&manifest, &base_dir(&manifest_path), &cfg, &a.stage1, &a.pipeline.out)?;
    summarize(&s)
}

fn run_cmd(a: PipelineArgs) -> Result<()> {
    let (cfg, manifest_path) = resolve_pipeline(&a)?;
    let manifest = checked_manifest(&manifest_path)?;
    let s = run_pipeline(&manifest, &base_dir(&manifest_path), &cfg, &a.out)?;
    summarize(&s)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut cfg = MatchConfig {
        strategy: a.strategy.into(),
        ..Default::default()
    };
    if let Some(px) = a.radius_px {
        cfg.radius = Radius::Pixels(px);
    }
    if let Some(um) = a.radius_um {
        cfg.radius = Radius::Microns(um);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = checked_manifest(&a.manifest)?;
    let file = File::open(&a.preds).with_context(|| format!("opening {}", a.preds.display()))?;
    let preds =
        read_detections_jsonl(BufReader::new(file)).with_context(|| format!("predictions {}", a.preds.display()))?;
    let report = mitopipe::eval::evaluate_run(&preds, &manifest, &cfg)?;
    let mut text = report.to_json();
    text.push('\n');
    write_or_stdout(a.out.as_deref(), text.as_bytes())?;
    if a.out.is_some() {
        print_json(&report.pooled)?;
    }
    Ok(())
}

fn schedule_cmd(a: ScheduleArgs) -> Result<()> {
    let spec = CosineWarmupSpec {
        base_lr: a.base_lr,
        warmup_epochs: a.warmup,
        total_epochs: a.total,
    };
    let csv = schedule_csv(&spec).map_err(|e| usage(e.to_string()))?;
    write_or_stdout(a.out.as_deref(), csv.as_bytes())
}

fn conformance_cmd(a: ConformanceArgs) -> Result<()> {
    if a.patch_size == 0 {
        return Err(usage("--patch-size must be at least 1"));
    }
    let (batches, fixture) = build_fixture(a.seed, a.patch_size);
    let (fixture_path, temporary) = match &a.fixture {
        Some(p) => (p.clone(), false),
        None => (
            std::env::temp_dir().join(format!("mitopipe-fixture-{}-{}.json", std::process::id(), a.seed)),
            true,
        ),
    };
    write_out(&fixture_path, fixture.to_json().as_bytes())?;
    let fixture_arg = fixture_path.to_string_lossy();
    let command: Vec<String> = split_command(&a.scorer_cmd)?
        .into_iter()
        .map(|t| t.replace("{fixture}", &fixture_arg))
        .collect();
    let outcome = ExternalScorer::spawn(&command, a.patch_size)
        .map(|scorer| run_conformance(scorer, &batches, |p| fixture.lookup(p)));
    if temporary {
        let _ = fs::remove_file(&fixture_path);
    }
    let report = outcome.with_context(|| format!("starting {}", a.scorer_cmd))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed() {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        return Err(NonConforming(format!("{failed} conformance check(s) failed")).into());
    }
    Ok(())
}

/// Test double around a real handler.
struct MockServer {
    inner: Box<dyn Handler>,
    misbehave: Option<Misbehave>,
}

impl Handler for MockServer {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn score(&mut self, patches: &[Patch]) -> Result<Vec<[f64; 2]>, String> {
        let mut probs = self.inner.score(patches)?;
        match self.misbehave {
            None => {}
            Some(Misbehave::BadProbs) => probs.iter_mut().for_each(|p| *p = [0.7, 0.7]),
            Some(Misbehave::ShortReply) => {
                probs.pop();
            }
            Some(Misbehave::Hangup) => std::process::exit(0),
        }
        Ok(probs)
    }
}

fn serve_stdio(handler: &mut impl Handler) -> Result<()> {
    let mut r = BufReader::new(io::stdin().lock());
    let mut w = BufWriter::new(io::stdout().lock());
    serve(&mut r, &mut w, handler)?;
    Ok(())
}

fn serve_mock_scorer(a: ServeMockScorerArgs) -> Result<()> {
    let inner: Box<dyn Handler> = match &a.fixture {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Box::new(EchoFixture::from_json(&text).with_context(|| format!("fixture {}", p.display()))?)
        }
        None => Box::new(MockIntensity),
    };
    serve_stdio(&mut MockServer {
        inner,
        misbehave: a.misbehave,
    })
}

fn serve_mock_detector(a: ServeMockDetectorArgs) -> Result<()> {
    let mut params = BlobParams::default();
    if let Some(t) = a.intensity_threshold {
        params.intensity_threshold = t;
    }
    params.validate().map_err(usage)?;
    serve_stdio(&mut params)
}
