//! Independent reference implementations used by the oracle, property and
//! acceptance tests. None of them call into the code they check.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mitopipe::postprocess::Detection;
use mitopipe::{BBox, Point, Raster};
use rand::Rng;

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let iy = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = ix * iy;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Textbook greedy NMS: best remaining box wins, ties by input order.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou_ref(&dets[k].bbox, &dets[i].bbox) <= thr) {
            kept.push(i);
        }
    }
    kept
}

/// Up to 200 boxes; a third of the instances reuse a few score values so
/// ties are exercised.
pub fn random_nms_instance(rng: &mut impl Rng) -> Vec<Detection> {
    let n = rng.random_range(0..=200);
    let tied = rng.random_bool(0.33);
    (0..n)
        .map(|_| {
            let x0 = rng.random_range(0.0..400.0);
            let y0 = rng.random_range(0.0..400.0);
            let w = rng.random_range(1.0..80.0);
            let h = rng.random_range(1.0..80.0);
            let score = if tied {
                rng.random_range(0..4) as f64 / 4.0
            } else {
                rng.random()
            };
            Detection::new(BBox::new(x0, y0, x0 + w, y0 + h), score)
        })
        .collect()
}

/// Maximum bipartite matching size by augmenting paths.
pub fn max_matching_size(preds: &[Point], gts: &[Point], radius: f64) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none() || augment(owner[v].unwrap(), adj, seen, owner) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| (0..gts.len()).filter(|&j| dist(p, &gts[j]) <= radius).collect())
        .collect();
    let mut owner = vec![None; gts.len()];
    (0..preds.len())
        .filter(|&u| augment(u, &adj, &mut vec![false; gts.len()], &mut owner))
        .count()
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Best (cardinality, then smallest total distance) over every injective
/// partial assignment. Exponential; keep inputs tiny.
pub fn brute_force_matching(preds: &[Point], gts: &[Point], radius: f64) -> (usize, f64) {
    fn go(
        i: usize,
        preds: &[Point],
        gts: &[Point],
        r: f64,
        used: &mut Vec<bool>,
        acc: (usize, f64),
        best: &mut (usize, f64),
    ) {
        if i == preds.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        go(i + 1, preds, gts, r, used, acc, best);
        for j in 0..gts.len() {
            let d = dist(&preds[i], &gts[j]);
            if !used[j] && d <= r {
                used[j] = true;
                go(i + 1, preds, gts, r, used, (acc.0 + 1, acc.1 + d), best);
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0.0);
    go(0, preds, gts, radius, &mut vec![false; gts.len()], (0, 0.0), &mut best);
    best
}

/// Ground truth on a coarse grid (spacing > 4·radius) and predictions either
/// near one ground-truth point or in empty space, so no prediction can reach
/// two ground-truth points.
pub fn well_separated_instance(rng: &mut impl Rng, radius: f64) -> (Vec<Point>, Vec<Point>) {
    let spacing = 5.0 * radius;
    let n_gt = rng.random_range(0..=12);
    let n_pred = rng.random_range(0..=12);
    let mut cells: Vec<(usize, usize)> = (0..8).flat_map(|i| (0..8).map(move |j| (i, j))).collect();
    for k in (1..cells.len()).rev() {
        cells.swap(k, rng.random_range(0..=k));
    }
    let gts: Vec<Point> = cells[..n_gt]
        .iter()
        .map(|&(i, j)| Point::new(i as f64 * spacing, j as f64 * spacing))
        .collect();
    let preds = (0..n_pred)
        .map(|_| {
            let base = if !gts.is_empty() && rng.random_bool(0.7) {
                gts[rng.random_range(0..gts.len())]
            } else {
                let (i, j) = cells[rng.random_range(n_gt..cells.len())];
                Point::new(i as f64 * spacing, j as f64 * spacing)
            };
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.0..1.5 * radius);
            Point::new(base.x + r * a.cos(), base.y + r * a.sin())
        })
        .collect();
    (preds, gts)
}

/// Mirror without repeating the edge pixel.
pub fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Disk blur from first principles: mean of all pixels within `radius`.
pub fn defocus_oracle(patch: &Raster, radius: i64) -> Raster {
    let (w, h) = (patch.width(), patch.height());
    let offsets: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64).sqrt() <= radius as f64)
        .collect();
    let mut out = patch.clone();
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0.0f64; 3];
            for &(dx, dy) in &offsets {
                let px = patch.pixel(reflect(x as i64 + dx, w), reflect(y as i64 + dy, h));
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
            }
            out.set_pixel(
                x,
                y,
                sum.map(|s| (s / offsets.len() as f64).round().clamp(0.0, 255.0) as u8),
            );
        }
    }
    out
}

pub fn random_raster(rng: &mut impl Rng, w: usize, h: usize) -> Raster {
    let bytes = (0..w * h * 3).map(|_| rng.random()).collect();
    Raster::from_vec(w, h, bytes).unwrap()
}

pub fn max_channel_diff(a: &Raster, b: &Raster) -> u8 {
    a.as_bytes()
        .iter()
        .zip(b.as_bytes())
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap_or(0)
}

/// Central-difference gradient.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut up = z.to_vec();
            let mut down = z.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

/// Relative error with an absolute floor so near-zero components compare sanely.
pub fn grad_close(analytic: &[f64], numeric: &[f64], rel: f64) -> bool {
    analytic
        .iter()
        .zip(numeric)
        .all(|(a, n)| (a - n).abs() <= rel * a.abs().max(n.abs()).max(1e-3))
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// The pinned schedule for base 1e-4, 5 warmup epochs, 50 total.
pub fn cosine_golden() -> Vec<f64> {
    (0..50)
        .map(|e| {
            if e < 5 {
                1e-4 * (e + 1) as f64 / 5.0
            } else {
                let t = (e - 5) as f64 / 44.0;
                1e-4 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        })
        .collect()
}

/// Stage-1 and post-filter metrics on the adversarial slide, per threshold.
pub struct MonotonicityRow {
    pub threshold: f64,
    pub stage1: mitopipe::Metrics,
    pub filtered: mitopipe::Metrics,
}

/// Candidate patches small enough to sit inside each planted figure, so the
/// intensity scorer sees only the figure's own tone.
pub const ADVERSARIAL_PATCH: usize = 32;

pub fn monotonicity_rows(seed: u64, thresholds: &[f64]) -> Vec<MonotonicityRow> {
    use mitopipe::ensemble::classify_candidates;
    use mitopipe::eval::evaluate_run;
    use mitopipe::pipeline::{gen_synthetic, run_stage1, Detector};
    use mitopipe::{DetectionRecord, MatchConfig, MockIntensity, PipelineConfig, Scorer, SyntheticSpec};

    let (raster, manifest) = gen_synthetic(&SyntheticSpec::adversarial(seed)).unwrap();
    let cfg = PipelineConfig::default();
    let mut detector = Detector::connect(&cfg.detector, cfg.tile_size).unwrap();
    let stage1 = run_stage1(&raster, &cfg, &mut detector).unwrap();
    let id = &manifest.images[0].id;
    let metrics = |dets: &[Detection]| {
        let recs: Vec<DetectionRecord> = dets.iter().map(|d| DetectionRecord::new(id, d)).collect();
        evaluate_run(&recs, &manifest, &MatchConfig::default()).unwrap().pooled
    };
    let before = metrics(&stage1);
    thresholds
        .iter()
        .map(|&t| {
            let mut scorers: Vec<Box<dyn Scorer>> = vec![Box::new(MockIntensity)];
            let c = classify_candidates(&raster, &stage1, ADVERSARIAL_PATCH, 32, t, &mut scorers).unwrap();
            MonotonicityRow {
                threshold: t,
                stage1: before,
                filtered: metrics(&c.kept),
            }
        })
        .collect()
}

/// Write the standard synthetic slide and its manifest into `dir`.
pub fn synthetic_slide(dir: &Path) -> (mitopipe::DatasetManifest, PathBuf) {
    use mitopipe::pipeline::gen_synthetic;
    let (raster, manifest) = gen_synthetic(&mitopipe::SyntheticSpec::default()).unwrap();
    raster.save(&dir.join(&manifest.images[0].path)).unwrap();
    (manifest, dir.to_path_buf())
}
