//! Seeded inputs shared by the benches.

use mitopipe::postprocess::Detection;
use mitopipe::rng::seeded;
use mitopipe::{BBox, Point, Raster};
use rand::Rng;

/// `n` 50-px boxes scattered over a `side`² slide with random scores.
pub fn random_detections(n: usize, side: f64, seed: u64) -> Vec<Detection> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let c = Point::new(rng.random_range(0.0..side), rng.random_range(0.0..side));
            Detection::new(BBox::centered(c, 50.0), rng.random())
        })
        .collect()
}

pub fn random_points(n: usize, side: f64, seed: u64) -> Vec<Point> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| Point::new(rng.random_range(0.0..side), rng.random_range(0.0..side)))
        .collect()
}

pub fn noise_patch(size: usize, seed: u64) -> Raster {
    let mut rng = seeded(seed);
    let bytes = (0..size * size * 3).map(|_| rng.random()).collect();
    Raster::from_vec(size, size, bytes).expect("sized buffer")
}
