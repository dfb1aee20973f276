//! Seeded synthetic clouds for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::pointcloud::{Point, PointCloud};

/// `count` roughly evenly spread unit directions (Fibonacci lattice).
fn spread_directions(count: usize) -> Vec<Point> {
    match count {
        1 => vec![[1.0, 0.0, 0.0]],
        2 => vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        _ => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|i| {
                    let y = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let r = (1.0 - y * y).sqrt();
                    let t = golden * i as f64;
                    [r * t.cos(), y, r * t.sin()]
                })
                .collect()
        }
    }
}

fn uniform_in_ball(rng: &mut ChaCha8Rng, radius: f64) -> Point {
    loop {
        let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
        if p.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            return p.map(|v| v * radius);
        }
    }
}

/// `blobs` uniform balls of `radius`, each holding `per_blob` points, with
/// centers spaced at least `separation` apart. Returns the cloud and each
/// point's blob index. Points are grouped by blob.
pub fn blob_cloud(
    blobs: usize,
    per_blob: usize,
    separation: f64,
    radius: f64,
    seed: u64,
) -> (PointCloud, Vec<usize>) {
    assert!(blobs >= 1 && per_blob >= 1);
    let dirs = spread_directions(blobs);
    let min_gap = if blobs == 1 {
        1.0
    } else {
        let mut gap = f64::INFINITY;
        for a in 0..blobs {
            for b in a + 1..blobs {
                let d: f64 = (0..3).map(|k| (dirs[a][k] - dirs[b][k]).powi(2)).sum::<f64>().sqrt();
                gap = gap.min(d);
            }
        }
        gap
    };
    let scale = separation / min_gap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(blobs * per_blob);
    let mut membership = Vec::with_capacity(blobs * per_blob);
    for (b, dir) in dirs.iter().enumerate() {
        for _ in 0..per_blob {
            let offset = uniform_in_ball(&mut rng, radius);
            points.push([0, 1, 2].map(|k| dir[k] * scale + offset[k]));
            membership.push(b);
        }
    }
    (PointCloud::new(points).expect("non-empty"), membership)
}

/// Isotropic Gaussian cloud.
pub fn gaussian_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
[0; 3].map(|_| rng.sample(StandardNormal))
        })
        .collect();
    PointCloud::new(points).expect("non-empty")
}

/// Uniform samples on the unit sphere.
pub fn sphere_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let p = loop {
                let p = uniform_in_ball(&mut rng, 1.0);
                let r2: f64 = p.iter().map(|v| v * v).sum();
                if r2 > 1e-6 {
                    break p;
                }
            };
            let r = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            p.map(|v| v / r)
        })
        .collect();
    PointCloud::new(points).expect("non-empty")
}
