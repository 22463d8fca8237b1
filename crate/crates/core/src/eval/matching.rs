use serde::{Deserialize, Serialize};

use crate::geometry::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    #[default]
    GreedyByDistance,
    /// Maximum-cardinality matching with minimal total distance.
    HungarianOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchPair>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<MatchPair>, n_pred: usize, n_gt: usize) -> Self {
        pairs.sort_by_key(|p| p.pred);
        let tp = pairs.len();
        Self {
            tp,
            fp: n_pred - tp,
            fn_: n_gt - tp,
            pairs,
        }
    }
}

/// Match predicted points to ground truth within `radius` px.
///
/// Scores do not take part in either strategy; they are accepted so callers
/// can pass detections straight through.
pub fn match_points(preds: &[(Point, f64)], gts: &[Point], radius: f64, strategy: MatchStrategy) -> MatchResult {
    let pairs = match strategy {
        MatchStrategy::GreedyByDistance => greedy(preds, gts, radius),
        MatchStrategy::HungarianOracle => hungarian(preds, gts, radius),
    };
    MatchResult::from_pairs(pairs, preds.len(), gts.len())
}

fn candidates(preds: &[(Point, f64)], gts: &[Point], radius: f64) -> Vec<MatchPair> {
    let mut out = Vec::new();
    for (pi, (p, _)) in preds.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let distance = p.distance(g);
            if distance <= radius {
                out.push(MatchPair {
                    pred: pi,
                    gt: gi,
                    distance,
                });
            }
        }
    }
    out
}

/// All in-radius pairs by ascending distance (ties: lower pred, then lower
/// gt index), accepted unless an endpoint is already used.
fn greedy(preds: &[(Point, f64)], gts: &[Point], radius: f64) -> Vec<MatchPair> {
    let mut cands = candidates(preds, gts, radius);
    cands.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.pred.cmp(&b.pred))
            .then(a.gt.cmp(&b.gt))
    });
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in cands {
        if pred_used[c.pred] || gt_used[c.gt] {
            continue;
        }
        pred_used[c.pred] = true;
        gt_used[c.gt] = true;
        pairs.push(c);
    }
    pairs
}

fn hungarian(preds: &[(Point, f64)], gts: &[Point], radius: f64) -> Vec<MatchPair> {
    let n = preds.len().max(gts.len());
    if n == 0 {
        return Vec::new();
    }
    // an infeasible pair costs more than any full set of feasible ones, so
    // the optimum maximizes the number of matches first, distance second
    let big = (n as f64 + 1.0) * (radius + 1.0);
    let cost = |i: usize, j: usize| -> f64 {
        match (preds.get(i), gts.get(j)) {
            (Some((p, _)), Some(g)) => {
                let d = p.distance(g);
                if d <= radius {
                    d
                } else {
                    big
                }
            }
            _ => 0.0,
        }
    };
    let assignment = min_cost_assignment(n, cost);
    assignment
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < preds.len() && j < gts.len())
        .filter_map(|(i, j)| {
            let d = preds[i].0.distance(&gts[j]);
            (d <= radius).then_some(MatchPair {
                pred: i,
                gt: j,
                distance: d,
            })
        })
        .collect()
}

/// Square assignment problem via shortest augmenting paths with potentials;
/// returns the column assigned to each row.
fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(pts: &[(f64, f64)]) -> Vec<(Point, f64)> {
        pts.iter().map(|&(x, y)| (Point::new(x, y), 1.0)).collect()
    }

    fn gts(pts: &[(f64, f64)]) -> Vec<Point> {
        pts.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn examples() {
        for s in [MatchStrategy::GreedyByDistance, MatchStrategy::HungarianOracle] {
            let r = match_points(&preds(&[(10.0, 0.0)]), &gts(&[(0.0, 0.0)]), 30.0, s);
            assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));

            let r = match_points(&preds(&[(0.0, 0.0), (5.0, 0.0)]), &gts(&[(0.0, 0.0)]), 30.0, s);
            assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
            assert_eq!((r.pairs[0].pred, r.pairs[0].gt, r.pairs[0].distance), (0, 0, 0.0));

            let r = match_points(&preds(&[(40.0, 0.0)]), &gts(&[(0.0, 0.0)]), 30.0, s);
            assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));

            let r = match_points(&[], &[], 30.0, s);
            assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 0));
        }
    }

    #[test]
    fn tie_breaks() {
        // equal distance: lower gt index wins
        let r = match_points(
            &preds(&[(10.0, 0.0)]),
            &gts(&[(0.0, 0.0), (20.0, 0.0)]),
            30.0,
            MatchStrategy::GreedyByDistance,
        );
        assert_eq!(r.pairs[0].gt, 0);
        // equal distance: lower pred index wins
        let r = match_points(
            &preds(&[(20.0, 0.0), (0.0, 0.0)]),
            &gts(&[(10.0, 0.0)]),
            30.0,
            MatchStrategy::GreedyByDistance,
        );
        assert_eq!(r.pairs[0].pred, 0);
        // otherwise the closer pred wins
        let r = match_points(
            &preds(&[(0.0, 0.0), (12.0, 0.0)]),
            &gts(&[(10.0, 0.0)]),
            14.0,
            MatchStrategy::GreedyByDistance,
        );
        assert_eq!(r.pairs[0].pred, 1);
    }

    #[test]
    fn greedy_can_lose_to_hungarian() {
        // p0-g0 (5) is taken first and blocks both p0-g1 (9) and p1-g0 (9)
        let p = preds(&[(5.0, 0.0), (-9.0, 0.0)]);
        let g = gts(&[(0.0, 0.0), (14.0, 0.0)]);
        let gr = match_points(&p, &g, 10.0, MatchStrategy::GreedyByDistance);
        let hu = match_points(&p, &g, 10.0, MatchStrategy::HungarianOracle);
        assert_eq!((gr.tp, hu.tp), (1, 2));
        assert_eq!(hu.fp + hu.fn_, 0);
    }

    #[test]
    fn hungarian_prefers_shorter_total_distance() {
        let p = preds(&[(0.0, 0.0), (10.0, 0.0)]);
        let g = gts(&[(1.0, 0.0), (11.0, 0.0)]);
        let hu = match_points(&p, &g, 30.0, MatchStrategy::HungarianOracle);
        let total: f64 = hu.pairs.iter().map(|p| p.distance).sum();
        assert_eq!(total, 2.0);
    }
}
