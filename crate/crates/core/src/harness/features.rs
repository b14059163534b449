//! Oracle feature provider: descriptors that stand in for a learned backbone.
//!
//! Every scene instance point receives the feature of the model point that
//! generated it with probability `inlier_rate`, and the feature of a uniformly
//! chosen *other* model point otherwise; background points get fresh random
//! features. The same scheme applies at superpoint level through patch majority
//! votes. Mutual nearest-feature matching therefore lands on the generating
//! point at roughly the requested rate, which is what calibrated benchmark
//! scenes need.

use super::scene::GroundTruth;
use super::HarnessError;
use crate::attention::{FeatureMatrix, InstanceMask};
use crate::geometry::Correspondence;
use crate::preprocess::SuperpointGraph;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Dense and superpoint descriptors for both clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleFeatures {
    /// Model dense features, one row per model point.
    pub p_points: FeatureMatrix,
    /// Scene dense features, one row per scene point.
    pub q_points: FeatureMatrix,
    /// Model superpoint features.
    pub p_super: FeatureMatrix,
    /// Scene superpoint features.
    pub q_super: FeatureMatrix,
}

fn random_unit_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return row.into_iter().map(|v| v / norm).collect();
        }
    }
}

fn copy_row(dst: &mut DMatrix<f64>, row: usize, src: &DMatrix<f64>, src_row: usize) {
    for c in 0..dst.ncols() {
        dst[(row, c)] = src[(src_row, c)];
    }
}

fn fill_row(dst: &mut DMatrix<f64>, row: usize, values: &[f64]) {
    for (c, v) in values.iter().enumerate() {
        dst[(row, c)] = *v;
    }
}

/// Uniformly random index different from `avoid` (requires `n >= 2`).
fn other_index(rng: &mut ChaCha8Rng, n: usize, avoid: usize) -> usize {
    (avoid + rng.random_range(1..n)) % n
}

/// Majority instance label of each superpoint's patch: ties go to the smaller
/// label, empty patches to background (0).
pub fn superpoint_labels(point_labels: &[i32], graph: &SuperpointGraph) -> Vec<i32> {
    let mut votes: Vec<std::collections::BTreeMap<i32, usize>> =
        vec![std::collections::BTreeMap::new(); graph.len()];
    for (point, &sp) in graph.patch_of.iter().enumerate() {
        *votes[sp].entry(point_labels[point]).or_insert(0) += 1;
    }
    votes
        .into_iter()
        .map(|counts| {
            counts
                .into_iter()
                // BTreeMap iterates labels ascending, so max_by keeps the
                // smaller label on tied counts.
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(label, _)| label)
        })
        .collect()
}

/// Ground-truth co-membership rows over the superpoint kNN slots: slot 0 (the
/// anchor itself) is always a member; other slots are members when both
/// superpoints carry the same instance label and that label is a real instance.
pub fn gt_co_membership(sp_labels: &[i32], knn: &[Vec<usize>]) -> Vec<Vec<bool>> {
    knn.iter()
        .enumerate()
        .map(|(i, slots)| {
            slots
                .iter()
                .enumerate()
                .map(|(slot, &j)| slot == 0 || (sp_labels[i] > 0 && sp_labels[i] == sp_labels[j]))
                .collect()
        })
        .collect()
}

/// The co-membership rows as a full-confidence neighbourhood mask.
pub fn gt_mask(sp_labels: &[i32], knn: &[Vec<usize>]) -> InstanceMask {
    InstanceMask::from_allowed(gt_co_membership(sp_labels, knn))
}

/// For each scene superpoint, the model superpoint that generated the majority
/// of its patch (ties to the smaller index); `None` for background-dominated
/// patches.
pub fn superpoint_origins(
    gt: &GroundTruth,
    model_graph: &SuperpointGraph,
    scene_graph: &SuperpointGraph,
) -> Vec<Option<usize>> {
    let mut votes: Vec<std::collections::BTreeMap<usize, usize>> =
        vec![std::collections::BTreeMap::new(); scene_graph.len()];
    let mut instance_points = vec![0usize; scene_graph.len()];
    let mut patch_sizes = vec![0usize; scene_graph.len()];
    for (point, &sp) in scene_graph.patch_of.iter().enumerate() {
        patch_sizes[sp] += 1;
        if let Some(origin) = gt.origins[point] {
            instance_points[sp] += 1;
            *votes[sp].entry(model_graph.patch_of[origin]).or_insert(0) += 1;
        }
    }
    votes
        .into_iter()
        .enumerate()
        .map(|(sp, counts)| {
            // Background-majority patches have no generating superpoint.
            if 2 * instance_points[sp] <= patch_sizes[sp] {
                return None;
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(model_sp, _)| model_sp)
        })
        .collect()
}

/// Builds oracle descriptors of width `dim` for both clouds; see the module
/// docs for the calibration scheme. Deterministic per `seed`.
pub fn oracle_features(
    gt: &GroundTruth,
    model_graph: &SuperpointGraph,
    scene_graph: &SuperpointGraph,
    n_model_points: usize,
    inlier_rate: f64,
    dim: usize,
    seed: u64,
) -> Result<OracleFeatures, HarnessError> {
    if !(0.0..=1.0).contains(&inlier_rate) {
        return Err(HarnessError::InvalidConfig(format!(
            "inlier rate {inlier_rate} outside [0, 1]"
        )));
    }
    if dim == 0 {
        return Err(HarnessError::InvalidConfig("feature dimension 0".into()));
    }
    let n_scene_points = gt.origins.len();
    if model_graph.patch_of.len() != n_model_points {
        return Err(HarnessError::ShapeMismatch(format!(
            "model graph partitions {} points, cloud has {}",
            model_graph.patch_of.len(),
            n_model_points
        )));
    }
    if scene_graph.patch_of.len() != n_scene_points {
        return Err(HarnessError::ShapeMismatch(format!(
            "scene graph partitions {} points, ground truth covers {}",
            scene_graph.patch_of.len(),
            n_scene_points
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p_points = DMatrix::zeros(n_model_points, dim);
    for i in 0..n_model_points {
        let row = random_unit_row(&mut rng, dim);
        fill_row(&mut p_points, i, &row);
    }
    let mut p_super = DMatrix::zeros(model_graph.len(), dim);
    for i in 0..model_graph.len() {
        let row = random_unit_row(&mut rng, dim);
        fill_row(&mut p_super, i, &row);
    }

    let mut q_points = DMatrix::zeros(n_scene_points, dim);
    for i in 0..n_scene_points {
        match gt.origins[i] {
            Some(origin) => {
                let inlier = n_model_points < 2 || rng.random_range(0.0..1.0) < inlier_rate;
                let source = if inlier {
                    origin
                } else {
                    other_index(&mut rng, n_model_points, origin)
                };
                copy_row(&mut q_points, i, &p_points, source);
            }
            None => {
                let row = random_unit_row(&mut rng, dim);
                fill_row(&mut q_points, i, &row);
            }
        }
    }

    let origins = superpoint_origins(gt, model_graph, scene_graph);
    let mut q_super = DMatrix::zeros(scene_graph.len(), dim);
    for (sp, origin) in origins.iter().enumerate() {
        match origin {
            Some(model_sp) => {
                let inlier = model_graph.len() < 2 || rng.random_range(0.0..1.0) < inlier_rate;
                let source = if inlier {
                    *model_sp
                } else {
                    other_index(&mut rng, model_graph.len(), *model_sp)
                };
                copy_row(&mut q_super, sp, &p_super, source);
            }
            None => {
                let row = random_unit_row(&mut rng, dim);
                fill_row(&mut q_super, sp, &row);
            }
        }
    }

    Ok(OracleFeatures {
        p_points,
        q_points,
        p_super,
        q_super,
    })
}

/// Mutual nearest-neighbour matches in feature space (Euclidean, ties to the
/// lower index), weights 1. The measurement used to calibrate `inlier_rate`.
pub fn mutual_top1_matches(p: &FeatureMatrix, q: &FeatureMatrix) -> Vec<Correspondence> {
    if p.nrows() == 0 || q.nrows() == 0 {
        return Vec::new();
    }
    let nearest = |rows: &FeatureMatrix, others: &FeatureMatrix| -> Vec<usize> {
        (0..rows.nrows())
            .map(|i| {
                let mut best = (f64::INFINITY, 0usize);
                for j in 0..others.nrows() {
                    let mut d = 0.0;
                    for c in 0..rows.ncols() {
                        let diff = rows[(i, c)] - others[(j, c)];
                        d += diff * diff;
                    }
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1
            })
            .collect()
    };
    let p_to_q = nearest(p, q);
    let q_to_p = nearest(q, p);
    (0..p.nrows())
        .filter(|&i| q_to_p[p_to_q[i]] == i)
        .map(|i| Correspondence::new(i, p_to_q[i], 1.0))
        .collect()
}
