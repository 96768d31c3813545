//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use memsteer::action_space::so3::rotation_angle;
use memsteer::action_space::{so3_exp, ActionChunk, ActionStep, Mat3, Vec3};
use memsteer::retrieval::RetrievalConfig;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_vec3(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * scale
}

/// Random chunk of horizon `h` with rotation vectors inside the pi ball.
pub fn random_chunk(rng: &mut impl Rng, h: usize) -> ActionChunk {
    ActionChunk::new(
        (0..h)
            .map(|_| {
                let mut dr = random_vec3(rng, 1.0);
                let n = dr.norm();
                if n > 0.0 {
                    dr *= rng.random_range(0.0..3.0) / n;
                }
                ActionStep::new(random_vec3(rng, 2.0), dr, rng.random_range(0.0..=1.0))
            })
            .collect(),
    )
}

/// Step cost written out from its definition, with rotation matrices.
pub fn reference_step_cost(x: &ActionStep, y: &ActionStep, cfg: &RetrievalConfig) -> f64 {
    let rx = so3_exp(&x.dr).unwrap();
    let ry = so3_exp(&y.dr).unwrap();
    (x.dp - y.dp).norm() + cfg.rotation_cost_weight * rotation_angle(&(rx.transpose() * ry)) + cfg.gripper_cost_weight * (x.g - y.g).abs()
}

/// Minimum cost over every monotone warping path, by exhaustive enumeration.
pub fn brute_force_dtw(a: &ActionChunk, b: &ActionChunk, cfg: &RetrievalConfig) -> f64 {
    fn walk(i: usize, j: usize, acc: f64, a: &[ActionStep], b: &[ActionStep], cfg: &RetrievalConfig, best: &mut f64) {
        let acc = acc + reference_step_cost(&a[i], &b[j], cfg);
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(i + 1, j, acc, a, b, cfg, best);
        }
        if j + 1 < b.len() {
            walk(i, j + 1, acc, a, b, cfg, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(i + 1, j + 1, acc, a, b, cfg, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(0, 0, 0.0, &a.steps, &b.steps, cfg, &mut best);
    best
}

/// Weighted sum of squared geodesic distances.
pub fn geodesic_objective(r: &Mat3, rotations: &[Mat3], weights: &[f64]) -> f64 {
    rotations
        .iter()
        .zip(weights)
        .map(|(ri, w)| w * rotation_angle(&(r.transpose() * ri)).powi(2))
        .sum()
}

/// Random set of rotations, with normalized weights, `center * exp(v)` with `|v| <= radius`.
pub fn rotation_ball(rng: &mut impl Rng, n: usize, radius: f64) -> (Mat3, Vec<Mat3>, Vec<f64>) {
    let center = so3_exp(&random_vec3(rng, 1.0)).unwrap();
    let rotations = (0..n)
        .map(|_| {
            let v = random_vec3(rng, 1.0);
            let v = v * (radius * rng.random::<f64>().cbrt() / v.norm());
            center * so3_exp(&v).unwrap()
        })
        .collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    (center, rotations, raw.iter().map(|w| w / total).collect())
}

/// Minimum of the objective over `center * exp(u)` on a cubic grid of
/// tangent vectors, refined twice around the best point.
pub fn grid_search_minimum(center: &Mat3, rotations: &[Mat3], weights: &[f64], radius: f64) -> f64 {
    let mut origin = Vec3::zeros();
    let mut half = radius;
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let n = 12i32;
        let step = half / n as f64;
        let mut arg = origin;
        for i in -n..=n {
            for j in -n..=n {
                for k in -n..=n {
                    let u = origin + Vec3::new(i as f64, j as f64, k as f64) * step;
                    let f = geodesic_objective(&(center * so3_exp(&u).unwrap()), rotations, weights);
                    if f < best {
                        best = f;
                        arg = u;
                    }
                }
            }
        }
        origin = arg;
        half = 2.0 * step;
    }
    best
}

/// Sample mean and covariance of row vectors.
pub fn mean_cov(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len() as f64;
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}
