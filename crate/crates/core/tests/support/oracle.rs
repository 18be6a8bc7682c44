//! Brute-force references for the evaluation metrics and the mixture NLL.

use std::sync::Arc;

use catf_core::geometry::Point;
use catf_core::metrics::EvalRecord;
use catf_core::model::PredictionSet;
use catf_core::scene::{DrivableGrid, Polygon};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Mode order by descending credibility, lower index first on ties, found by
/// repeated selection.
pub fn naive_rank(cred: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..cred.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if cred[left[j]] > cred[left[best]] {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn naive_dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

#[allow(clippy::needless_range_loop)]
pub fn naive_ade(truth: &[Point], pred: &PredictionSet, k: usize) -> f64 {
    let mut best = f64::INFINITY;
    for &m in &naive_rank(&pred.credibility)[..k] {
        let mut total = 0.0;
        for t in 0..truth.len() {
            total += naive_dist(truth[t], pred.trajectories[m][t]);
        }
        let ade = total / truth.len() as f64;
        if ade < best {
            best = ade;
        }
    }
    best
}

pub fn naive_fde(truth: &[Point], pred: &PredictionSet, k: usize) -> f64 {
    let last = truth.len() - 1;
    let mut best = f64::INFINITY;
    for &m in &naive_rank(&pred.credibility)[..k] {
        best = best.min(naive_dist(truth[last], pred.trajectories[m][last]));
    }
    best
}

/// Strictly inside the counter-clockwise square: every edge has the point on its left.
pub fn strictly_inside(p: Point, min: Point, max: Point) -> bool {
    let corners = [min, [max[0], min[1]], max, [min[0], max[1]]];
    (0..4).all(|i| {
        let a = corners[i];
        let b = corners[(i + 1) % 4];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0.0
    })
}

pub fn naive_offroad(grid: &DrivableGrid, p: Point) -> bool {
    let (lo, hi) = grid.extent();
    if !(p[0] >= lo[0] && p[0] < hi[0] && p[1] >= lo[1] && p[1] < hi[1]) {
        return true;
    }
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if grid.is_blocked(r, c) {
                let min = [
                    grid.origin[0] + c as f64 * grid.cell_size,
                    grid.origin[1] + r as f64 * grid.cell_size,
                ];
                let max = [min[0] + grid.cell_size, min[1] + grid.cell_size];
                if strictly_inside(p, min, max) {
                    return true;
                }
            }
        }
    }
    false
}

pub fn naive_offroad_rate(record: &EvalRecord, k: usize) -> f64 {
    let mut off = 0usize;
    let mut total = 0usize;
    for &m in &naive_rank(&record.prediction.credibility)[..k] {
        for &p in &record.prediction.trajectories[m] {
            total += 1;
            if naive_offroad(&record.grid, p) {
                off += 1;
            }
        }
    }
    off as f64 / total as f64
}

pub fn random_point(r: &mut ChaCha8Rng) -> Point {
    // a quarter of the points sit exactly on cell edges or corners
    if r.gen_bool(0.25) {
        [r.gen_range(-7..=7) as f64, r.gen_range(-7..=7) as f64]
    } else {
        [r.gen_range(-7.0..7.0), r.gen_range(-7.0..7.0)]
    }
}

pub fn random_record(i: usize, r: &mut ChaCha8Rng) -> EvalRecord {
    let k = r.gen_range(1..=7);
    let h = r.gen_range(1..=6);
    let truth: Vec<Point> = (0..h).map(|_| random_point(r)).collect();
    let trajectories: Vec<Vec<Point>> = (0..k).map(|_| (0..h).map(|_| random_point(r)).collect()).collect();
    // occasional exact ties exercise the index tie-break
    let raw: Vec<f64> = (0..k)
        .map(|_| if r.gen_bool(0.2) { 1.0 } else { r.gen_range(0.1..2.0) })
        .collect();
    let sum: f64 = raw.iter().sum();
    let cred: Vec<f64> = raw.iter().map(|c| c / sum).collect();
    let rects: Vec<Polygon> = (0..r.gen_range(1..4))
        .map(|_| {
            let x = r.gen_range(-6.0..4.0);
            let y = r.gen_range(-6.0..4.0);
            Polygon::rectangle([x, y], [x + r.gen_range(1.0..6.0), y + r.gen_range(1.0..6.0)])
        })
        .collect();
    let grid = DrivableGrid::from_polygons(&rects, [-6.0, -6.0], 1.0, 12, 12).unwrap();
    EvalRecord {
        scene_id: format!("s{:03}", 99 - i),
        agent_id: r.gen_range(0..3),
        truth,
        prediction: PredictionSet::new(trajectories, cred).unwrap(),
        grid: Arc::new(grid),
    }
}

/// Mixture NLL straight from the product of unit Gaussian densities.
pub fn naive_nll(truth: &[Point], preds: &[Vec<Point>], cred: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (mode, &c) in preds.iter().zip(cred) {
        let mut density = 1.0;
        for (a, b) in truth.iter().zip(mode) {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            density *= (-0.5 * dx * dx).exp() * (-0.5 * dy * dy).exp();
        }
        sum += c * density;
    }
    -sum.ln()
}
