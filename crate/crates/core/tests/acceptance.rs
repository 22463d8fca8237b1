//! Acceptance suite: one PASS/FAIL line per criterion, with its runtime.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails if any check fails, except those listed in [`BLOCKED`].

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use mitopipe::augment::{d4_apply, defocus, lab_to_rgb, reinhard_transfer, rgb_to_lab, LabRaster};
use mitopipe::eval::{f1, match_points};
use mitopipe::ingest::{class_counts, parse_manifest};
use mitopipe::pipeline::{gen_synthetic, run_pipeline, with_jobs};
use mitopipe::postprocess::nms_indices;
use mitopipe::sampler::allocate_counts;
use mitopipe::trainmath::{
    cosine_warmup_lr, cross_entropy, focal_loss, focal_loss_grad, kd_loss, kd_loss_grad, schedule_csv,
};
use mitopipe::{
    Annotation, CosineWarmupSpec, D4Element, DatasetManifest, ImageRecord, Label, MatchStrategy, PadPolicy,
    PipelineConfig, Point, Raster, SyntheticSpec, TemplateStats,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Checks known to fail for reasons outside the implementation.
const BLOCKED: &[(&str, &str)] = &[(
    "kd hand fixture",
    "the literal 1.244167 uses KL = 0.112199; the exact KL(q||[0.5,0.5]) for q = softmax([1,0]) is 0.109620, giving 1.234126",
)];

struct Check {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn check(name: &'static str, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        ok,
        detail: detail.into(),
    }
}

struct Criterion {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Vec<Check>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn harmonic_fixtures() -> Vec<Check> {
    [
        (0.1267, 0.9528, 0.2237, 5e-4),
        (0.1162, 0.8055, 0.2031, 5e-4),
        (0.0578, 0.9820, 0.1091, 5e-4),
        (0.85, 0.82, 0.83, 5e-3),
    ]
    .into_iter()
    .map(|(p, r, want, tol)| {
        let got = f1(p, r);
        check(
            "f1 fixture",
            (got - want).abs() <= tol,
            format!("f1({p}, {r}) = {got:.6}, want {want} ± {tol}"),
        )
    })
    .collect()
}

/// Several images so per-image and pooled bookkeeping both matter.
fn generated_manifest(n_mit: usize, n_imp: usize, seed: u64) -> DatasetManifest {
    let mut rng = rng(seed);
    let images: Vec<ImageRecord> = (0..16)
        .map(|i| ImageRecord {
            id: format!("img{i:02}"),
            path: format!("img{i:02}.tiff"),
            width: 7000,
            height: 5000,
            microns_per_pixel: 0.25,
        })
        .collect();
    let mut annotations: Vec<Annotation> = (0..n_mit)
        .map(|_| Label::Mitotic)
        .chain((0..n_imp).map(|_| Label::Imposter))
        .map(|label| Annotation {
            image_id: images[rng.random_range(0..images.len())].id.clone(),
            center: Point::new(rng.random_range(0.0..7000.0), rng.random_range(0.0..5000.0)),
            bbox: None,
            label,
        })
        .collect();
    for k in (1..annotations.len()).rev() {
        annotations.swap(k, rng.random_range(0..=k));
    }
    DatasetManifest {
        name: "generated".into(),
        images,
        annotations,
    }
}

fn count_bookkeeping() -> Vec<Check> {
    [(123_614, 460_288, 583_902, 1), (20_790, 78_673, 99_463, 2)]
        .into_iter()
        .map(|(mit, imp, total, seed)| {
            let m = parse_manifest(&generated_manifest(mit, imp, seed).to_json()).unwrap();
            let c = class_counts(&m);
            check(
                "class counts",
                (c.mitotic, c.imposter, c.total_annotations) == (mit, imp, total) && mit + imp == total,
                format!("{} + {} = {}", c.mitotic, c.imposter, c.total_annotations),
            )
        })
        .collect()
}

fn nms_oracle() -> Vec<Check> {
    let mut rng = rng(100);
    let (mut mismatches, mut worst) = (0, 0.0f64);
    for _ in 0..1000 {
        let dets = random_nms_instance(&mut rng);
        let got = nms_indices(&dets, 0.4);
        if got != nms_reference(&dets, 0.4) {
            mismatches += 1;
        }
        for (a, &i) in got.iter().enumerate() {
            for &j in &got[a + 1..] {
                worst = worst.max(iou_ref(&dets[i].bbox, &dets[j].bbox));
            }
        }
    }
    vec![
        check(
            "nms equals reference",
            mismatches == 0,
            format!("{mismatches}/1000 instances differ"),
        ),
        check("post-nms pairwise iou", worst <= 0.4, format!("max {worst:.4}")),
    ]
}

fn matching_oracle() -> Vec<Check> {
    let mut rng = rng(200);
    let radius = 30.0;
    let (mut differ, mut unstable, mut matched) = (0, 0, 0);
    for _ in 0..1000 {
        let (preds, gts) = well_separated_instance(&mut rng, radius);
        let scored: Vec<(Point, f64)> = preds.iter().map(|p| (*p, rng.random())).collect();
        let g = match_points(&scored, &gts, radius, MatchStrategy::GreedyByDistance);
        let h = match_points(&scored, &gts, radius, MatchStrategy::HungarianOracle);
        differ += usize::from(g.tp != h.tp);
        unstable += usize::from(g != match_points(&scored, &gts, radius, MatchStrategy::GreedyByDistance));
        matched += g.tp;
    }
    // equidistant claimants: the lower prediction index wins
    let gt = [Point::new(0.0, 0.0)];
    let tied = [(Point::new(3.0, 4.0), 0.2), (Point::new(-4.0, 3.0), 0.9)];
    let t = match_points(&tied, &gt, 10.0, MatchStrategy::GreedyByDistance);
    let tie_ok = t.tp == 1 && t.pairs[0].pred == 0;
    vec![
        check(
            "greedy tp == hungarian tp",
            differ == 0,
            format!("{differ}/1000 differ, {matched} matches total"),
        ),
        check(
            "greedy is repeatable",
            unstable == 0,
            format!("{unstable}/1000 unstable"),
        ),
        check("distance tie goes to lower index", tie_ok, format!("{:?}", t.pairs)),
    ]
}

fn augmentation_math() -> Vec<Check> {
    let mut out = Vec::new();

    let all = D4Element::all();
    let id = D4Element::from_index(0);
    let mut rng = rng(300);
    let probe = random_raster(&mut rng, 7, 7);
    let mut bad = Vec::new();
    for &a in &all {
        if a.compose(id) != a || id.compose(a) != a || a.compose(a.inverse()) != id || a.inverse().compose(a) != id {
            bad.push(format!("{a:?} identity/inverse"));
        }
        for &b in &all {
            let composed = a.compose(b);
            let sequential = d4_apply(&d4_apply(&probe, b).unwrap(), a).unwrap();
            if !all.contains(&composed) || sequential != d4_apply(&probe, composed).unwrap() {
                bad.push(format!("{a:?}∘{b:?} closure"));
            }
            for &c in &all {
                if a.compose(b).compose(c) != a.compose(b.compose(c)) {
                    bad.push(format!("{a:?},{b:?},{c:?} associativity"));
                }
            }
        }
    }
    let distinct = all
        .iter()
        .map(|g| d4_apply(&probe, *g).unwrap().as_bytes().to_vec())
        .collect::<std::collections::HashSet<_>>()
        .len();
    out.push(check(
        "d4 group axioms",
        bad.is_empty() && distinct == 8,
        format!("{} violations, {distinct} distinct images", bad.len()),
    ));

    let mut worst = 0u8;
    for i in 0..100 {
        let p = random_raster(&mut rng, 16, 16);
        let r = 1 + (i % 3) as u32;
        worst = worst.max(max_channel_diff(
            &defocus(&p, r, PadPolicy::Reflect).unwrap(),
            &defocus_oracle(&p, r as i64),
        ));
    }
    out.push(check(
        "defocus vs brute force",
        worst <= 1,
        format!("max diff {worst} LSB over 100 patches"),
    ));

    let (mut mean_err, mut std_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let src = tissue_patch(&mut rng, 64);
        let template = TemplateStats::of_patch(&tissue_patch(&mut rng, 64));
        let (mean, std) = LabRaster::from_rgb(&reinhard_transfer(&src, &template)).channel_stats();
        for c in 0..3 {
            mean_err = mean_err.max((mean[c] - template.mean[c]).abs());
            std_err = std_err.max((std[c] - template.std[c]).abs() / template.std[c]);
        }
    }
    out.push(check(
        "reinhard hits template",
        mean_err <= 0.5 && std_err <= 0.02,
        format!("max |Δmean| {mean_err:.4}, max rel Δstd {:.3}%", 100.0 * std_err),
    ));

    let mut worst = 0u8;
    for r in 0..=255u8 {
        for g in 0..=255u8 {
            for b in (0..=255u8).step_by(3) {
                let back = lab_to_rgb(rgb_to_lab([r, g, b]));
                worst = worst.max((0..3).map(|c| back[c].abs_diff([r, g, b][c])).max().unwrap());
            }
        }
    }
    out.push(check("rgb-lab round trip", worst <= 1, format!("max diff {worst} LSB")));
    out
}

/// Single-stain tissue texture with enough chroma spread that 8-bit
/// requantization stays well under the std tolerance, and templates drawn
/// from the same family stay inside the sRGB gamut.
fn tissue_patch(rng: &mut impl Rng, size: usize) -> Raster {
    let base = [
        rng.random_range(150..180i32),
        rng.random_range(95..115),
        rng.random_range(120..140),
    ];
    let bytes = (0..size * size)
        .flat_map(|_| {
            let d: i32 = rng.random_range(-25..=25);
            base.map(|c| (c + d + rng.random_range(-22..=22)).clamp(0, 255) as u8)
        })
        .collect();
    Raster::from_vec(size, size, bytes).unwrap()
}

fn kd_hand_fixture() -> f64 {
    kd_loss(&[0.0, 0.0], &[4.0, 0.0], 0, 4.0, 0.5).unwrap()
}

/// KL(softmax([1,0]) || [0.5,0.5]) written out by hand.
fn kd_hand_oracle() -> f64 {
    let q1 = 1.0 / (1.0 + (-1.0f64).exp());
    let q = [q1, 1.0 - q1];
    let kl: f64 = q.iter().map(|qi| qi * (qi / 0.5).ln()).sum();
    0.5 * 2f64.ln() + 0.5 * 16.0 * kl
}

fn trainmath() -> Vec<Check> {
    let mut rng = rng(400);
    let logits = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..rng.random_range(2..6))
            .map(|_| rng.random_range(-6.0..6.0))
            .collect()
    };
    let (mut focal_gap, mut kd_gap) = (0.0f64, 0.0f64);
    let mut grad_fail = 0;
    for _ in 0..500 {
        let z = logits(&mut rng);
        let label = rng.random_range(0..z.len());
        let ce = cross_entropy(&z, label).unwrap();
        focal_gap = focal_gap.max((focal_loss(&z, label, 0.0, 1.0).unwrap() - ce).abs());
        let ratio = rng.random_range(0.0..=1.0);
        kd_gap = kd_gap.max((kd_loss(&z, &z, label, 4.0, ratio).unwrap() - ratio * ce).abs());

        let t: Vec<f64> = (0..z.len()).map(|_| rng.random_range(-6.0..6.0)).collect();
        let gamma = rng.random_range(0.0..3.0);
        let fo = numeric_grad(|v| focal_loss(v, label, gamma, 0.25).unwrap(), &z, 1e-5);
        let kd = numeric_grad(|v| kd_loss(v, &t, label, 4.0, 0.5).unwrap(), &z, 1e-5);
        if !grad_close(&focal_loss_grad(&z, label, gamma, 0.25).unwrap(), &fo, 1e-5)
            || !grad_close(&kd_loss_grad(&z, &t, label, 4.0, 0.5).unwrap(), &kd, 1e-5)
        {
            grad_fail += 1;
        }
    }

    let spec = CosineWarmupSpec {
        base_lr: 1e-4,
        warmup_epochs: 5,
        total_epochs: 50,
    };
    let csv = schedule_csv(&spec).unwrap();
    let parsed: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (e, lr) = l.split_once(',').unwrap();
            (e.parse().unwrap(), lr.parse().unwrap())
        })
        .collect();
    let golden = cosine_golden();
    let csv_ok = csv.starts_with("epoch,lr\n")
        && parsed.len() == golden.len()
        && parsed
            .iter()
            .enumerate()
            .all(|(i, &(e, lr))| e == i && (lr - golden[i]).abs() <= 1e-18);
    let pinned: Vec<(usize, f64, f64)> = [(0, 2e-5), (4, 1e-4), (27, 5e-5)]
        .map(|(e, want)| (e, want, cosine_warmup_lr(e, &spec).unwrap()))
        .to_vec();
    let pinned_ok = pinned.iter().all(|&(_, want, got)| (got - want).abs() <= 1e-15);

    let kd = kd_hand_fixture();
    let oracle = kd_hand_oracle();
    vec![
        check(
            "focal(gamma=0) == ce",
            focal_gap <= 1e-12,
            format!("max gap {focal_gap:.2e}"),
        ),
        check("kd zero gap", kd_gap <= 1e-12, format!("max gap {kd_gap:.2e}")),
        check(
            "kd matches independent oracle",
            (kd - oracle).abs() <= 1e-12,
            format!("{kd:.10} vs {oracle:.10}"),
        ),
        check(
            "kd hand fixture",
            (kd - 1.244167).abs() <= 1e-5,
            format!("got {kd:.6}, want 1.244167 ± 1e-5"),
        ),
        check(
            "finite-difference gradients",
            grad_fail == 0,
            format!("{grad_fail}/500 outside 1e-5 relative"),
        ),
        check("cosine golden csv", csv_ok, format!("{} rows", parsed.len())),
        check("cosine pinned epochs", pinned_ok, format!("{pinned:?}")),
    ]
}

fn allocation() -> Vec<Check> {
    let fixture = allocate_counts(4096, [5.0, 1.0, 4.0]).unwrap();
    let ratios = [
        [5.0, 1.0, 4.0],
        [1.0, 1.0, 1.0],
        [0.5, 0.3, 0.2],
        [2.0, 0.0, 7.0],
        [0.1, 0.7, 0.2],
    ];
    let mut bad = 0;
    for total in 0..=10_000 {
        for r in ratios {
            bad += usize::from(allocate_counts(total, r).unwrap().iter().sum::<usize>() != total);
        }
    }
    vec![
        check("(4096, (5,1,4))", fixture == [2048, 410, 1638], format!("{fixture:?}")),
        check(
            "sums exact",
            bad == 0,
            format!("{bad} of {} allocations off", 10_001 * ratios.len()),
        ),
    ]
}

fn end_to_end() -> Vec<Check> {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let (raster, manifest) = gen_synthetic(&spec).unwrap();
    raster.save(&dir.path().join(&manifest.images[0].path)).unwrap();
    let cfg = PipelineConfig {
        seed: spec.seed,
        ..PipelineConfig::default()
    };
    let run = |jobs: Option<usize>, name: &str| {
        let out = dir.path().join(name);
        let s = with_jobs(jobs, || run_pipeline(&manifest, dir.path(), &cfg, &out)).unwrap();
        (s.report.unwrap().pooled, tree(&out))
    };
    let (m, first) = run(Some(1), "a");
    let (_, second) = run(Some(1), "b");
    let n = std::thread::available_parallelism().map_or(4, |n| n.get()).max(2);
    let (_, wide) = run(Some(n), "c");
    vec![
        check(
            "P = R = F1 = 1",
            (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0),
            format!(
                "P {} R {} F1 {} ({} mitoses, {} imposters)",
                m.precision, m.recall, m.f1, spec.n_mitoses, spec.n_imposters
            ),
        ),
        check(
            "two runs byte-identical",
            first == second,
            format!("{} files", first.len()),
        ),
        check("jobs 1 vs jobs N byte-identical", first == wide, format!("N = {n}")),
    ]
}

fn filter_monotonicity() -> Vec<Check> {
    monotonicity_rows(3, &[0.1, 0.3, 0.5, 0.7, 0.9])
        .into_iter()
        .map(|r| {
            check(
                "precision up, recall down",
                r.filtered.precision >= r.stage1.precision && r.filtered.recall <= r.stage1.recall,
                format!(
                    "t={}: P {:.3} -> {:.3}, R {:.3} -> {:.3}",
                    r.threshold, r.stage1.precision, r.filtered.precision, r.stage1.recall, r.filtered.recall
                ),
            )
        })
        .collect()
}

fn main() {
    let criteria = [
        Criterion {
            name: "harmonic-mean fixtures",
            budget: Some(Duration::from_secs(1)),
            run: harmonic_fixtures,
        },
        Criterion {
            name: "count bookkeeping",
            budget: None,
            run: count_bookkeeping,
        },
        Criterion {
            name: "nms oracle",
            budget: Some(Duration::from_secs(10)),
            run: nms_oracle,
        },
        Criterion {
            name: "matching oracle",
            budget: Some(Duration::from_secs(30)),
            run: matching_oracle,
        },
        Criterion {
            name: "augmentation math",
            budget: None,
            run: augmentation_math,
        },
        Criterion {
            name: "trainmath",
            budget: None,
            run: trainmath,
        },
        Criterion {
            name: "allocation",
            budget: None,
            run: allocation,
        },
        Criterion {
            name: "end-to-end determinism",
            budget: Some(Duration::from_secs(60)),
            run: end_to_end,
        },
        Criterion {
            name: "filter monotonicity",
            budget: None,
            run: filter_monotonicity,
        },
    ];
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let (mut failed, mut unexpected) = (0, 0);
    for c in &criteria {
        let start = Instant::now();
        let mut checks = (c.run)();
        let took = start.elapsed();
        if let Some(budget) = c.budget {
            checks.push(check("runtime", took < budget, format!("{:.2?} < {budget:?}", took)));
        }
        let ok = checks.iter().all(|k| k.ok);
        failed += usize::from(!ok);
        writeln!(out, "{} {} ({:.2?})", if ok { "PASS" } else { "FAIL" }, c.name, took).unwrap();
        for k in &checks {
            writeln!(
                out,
                "    {} {}: {}",
                if k.ok { "ok  " } else { "FAIL" },
                k.name,
                k.detail
            )
            .unwrap();
            if !k.ok {
                match BLOCKED.iter().find(|(name, _)| *name == k.name) {
                    Some((_, why)) => writeln!(out, "         known blocker: {why}").unwrap(),
                    None => unexpected += 1,
                }
            }
        }
    }
    writeln!(
        out,
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    )
    .unwrap();
    if unexpected > 0 {
        writeln!(out, "{unexpected} unexpected check failure(s)").unwrap();
        std::process::exit(1);
    }
}
