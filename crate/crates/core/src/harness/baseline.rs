//! Sequential multi-model RANSAC baseline: repeatedly fit one rigid pose to the
//! remaining correspondences with 3-point hypotheses, keep the best-supported
//! pose, remove its inliers, and continue until support collapses.

use crate::geometry::{weighted_svd, Correspondence, Point3, RigidTransform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn residual(pose: &RigidTransform, c: &Correspondence, p: &[Point3], q: &[Point3]) -> f64 {
    (pose.apply(&p[c.p_index]) - q[c.q_index]).norm()
}

/// Extracts up to `max_models` poses from `correspondences`.
///
/// Each round runs `iters_per_model` hypotheses: three distinct correspondences
/// are drawn, a pose is fit with unit weights, and its support is the number of
/// remaining correspondences strictly within `tau2`. The best-supported pose is
/// kept as-is, its inliers are removed, and the loop stops when the best
/// support drops below 3 (a pose needs at least its defining points).
/// Deterministic per `seed`.
pub fn sequential_ransac(
    correspondences: &[Correspondence],
    p_dense: &[Point3],
    q_dense: &[Point3],
    tau2: f64,
    max_models: usize,
    iters_per_model: usize,
    seed: u64,
) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<Correspondence> = correspondences.to_vec();
    let mut poses = Vec::new();
    for _ in 0..max_models {
        if remaining.len() < 3 {
            break;
        }
        let mut best: Option<(usize, RigidTransform)> = None;
        for _ in 0..iters_per_model {
            let a = rng.random_range(0..remaining.len());
            let b = rng.random_range(0..remaining.len());
            let c = rng.random_range(0..remaining.len());
            if a == b || b == c || a == c {
                continue;
            }
            let pairs = [remaining[a], remaining[b], remaining[c]]
                .map(|corr| (p_dense[corr.p_index], q_dense[corr.q_index]));
            let Ok(pose) = weighted_svd(&pairs, &[1.0; 3]) else {
                continue; // collinear or repeated points
            };
            let support = remaining
                .iter()
                .filter(|corr| residual(&pose, corr, p_dense, q_dense) < tau2)
                .count();
            if best.as_ref().is_none_or(|(s, _)| support > *s) {
                best = Some((support, pose));
            }
        }
        let Some((support, pose)) = best else { break };
        if support < 3 {
            break;
        }
        remaining.retain(|corr| residual(&pose, corr, p_dense, q_dense) >= tau2);
        poses.push(pose);
    }
    poses
}
