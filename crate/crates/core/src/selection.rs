//! Hypothesis selection: turning per-seed candidate poses into one pose per
//! object instance.
//!
//! Candidates are ranked by how many of the globally extracted
//! correspondences their pose explains, then greedily clustered: the best
//! unconsumed candidate absorbs every remaining candidate whose pose agrees
//! with it (model-space agreement above a similarity threshold). Each
//! cluster's correspondences are merged (per-pair maximum weight), the pose
//! is re-solved and iteratively refined on its inliers, and weak hypotheses —
//! those explaining too small a fraction of what the best hypothesis
//! explains — are discarded. Every ordering uses explicit tie-breaks, so the
//! result is deterministic.

use crate::geometry::{add_distance, weighted_svd, Correspondence, Point3, RigidTransform};
use crate::matching::{CandidateEstimate, SuperpointCorrespondence};

/// Tunables of the selection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    /// Residual radius below which a correspondence counts as an inlier
    /// (strictly less than).
    pub inlier_radius: f64,
    /// Minimum model-space pose similarity (`1 - ADD / diameter`) for two
    /// candidates to merge.
    pub merge_similarity: f64,
    /// A hypothesis is dropped when its inlier count falls below this
    /// fraction of the best hypothesis' count.
    pub min_count_ratio: f64,
    /// Refinement rounds re-fitting the pose on its own inliers.
    pub refine_iterations: usize,
    /// Largest model extent; the similarity normalizer.
    pub model_diameter: f64,
    /// Model points used when comparing two poses (subsampled evenly from
    /// the dense model cloud up to this many).
    pub similarity_samples: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            inlier_radius: 0.05,
            merge_similarity: 0.8,
            min_count_ratio: 0.8,
            refine_iterations: 5,
            model_diameter: 1.0,
            similarity_samples: 256,
        }
    }
}

/// One selected instance: a pose with the evidence behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHypothesis {
    pub pose: RigidTransform,
    /// Seed pair of the cluster leader.
    pub seed: SuperpointCorrespondence,
    /// Merged correspondence support of the cluster.
    pub correspondences: Vec<Correspondence>,
    /// Inliers of `pose` among the global correspondence set.
    pub inlier_count: usize,
    /// `inlier_count` over the global set size.
    pub inlier_ratio: f64,
}

/// Merges correspondence lists, keeping one entry per `(p, q)` pair with the
/// largest weight, ordered by `(p, q)`.
pub fn dedupe_union(lists: &[&[Correspondence]]) -> Vec<Correspondence> {
    let mut map: std::collections::BTreeMap<(usize, usize), f64> =
        std::collections::BTreeMap::new();
    for list in lists {
        for c in *list {
            let slot = map
                .entry((c.p_index, c.q_index))
                .or_insert(f64::NEG_INFINITY);
            if c.weight > *slot {
                *slot = c.weight;
            }
        }
    }
    map.into_iter()
        .map(|((p_index, q_index), weight)| Correspondence {
            p_index,
            q_index,
            weight,
        })
        .collect()
}

/// Counts correspondences whose residual under `pose` is strictly inside
/// `radius`, and that count as a fraction of the set.
pub fn global_inlier_stats(
    pose: &RigidTransform,
    corrs: &[Correspondence],
    p_dense: &[Point3],
    q_dense: &[Point3],
    radius: f64,
) -> (usize, f64) {
    if corrs.is_empty() {
        return (0, 0.0);
    }
    let count = corrs
        .iter()
        .filter(|c| (pose.apply(&p_dense[c.p_index]) - q_dense[c.q_index]).norm() < radius)
        .count();
    (count, count as f64 / corrs.len() as f64)
}

/// Model-space agreement of two poses: one minus their average point
/// distance over the sampled model, normalized by the model diameter.
/// Identical poses score exactly one; the score is unbounded below.
pub fn pose_similarity(
    a: &RigidTransform,
    b: &RigidTransform,
    model_samples: &[Point3],
    diameter: f64,
) -> f64 {
    1.0 - add_distance(a, b, model_samples) / diameter
}

/// Re-fits `pose` on its strict inliers among `corrs`, up to `iterations`
/// times. Stops early when fewer than three inliers remain or the fit
/// degenerates, keeping the last valid pose.
pub fn refine_pose(
    pose: &RigidTransform,
    corrs: &[Correspondence],
    p_dense: &[Point3],
    q_dense: &[Point3],
    radius: f64,
    iterations: usize,
) -> RigidTransform {
    let mut current = *pose;
    for _ in 0..iterations {
        let inliers: Vec<&Correspondence> = corrs
            .iter()
            .filter(|c| (current.apply(&p_dense[c.p_index]) - q_dense[c.q_index]).norm() < radius)
            .collect();
        if inliers.len() < 3 {
            break;
        }
        let pairs: Vec<(Point3, Point3)> = inliers
            .iter()
            .map(|c| (p_dense[c.p_index], q_dense[c.q_index]))
            .collect();
        let weights: Vec<f64> = inliers.iter().map(|c| c.weight).collect();
        match weighted_svd(&pairs, &weights) {
            Ok(next) => current = next,
            Err(_) => break,
        }
    }
    current
}

fn sample_model(p_dense: &[Point3], samples: usize) -> Vec<Point3> {
    if p_dense.len() <= samples.max(1) {
        return p_dense.to_vec();
    }
    let stride = p_dense.len().div_ceil(samples.max(1));
    p_dense.iter().step_by(stride).copied().collect()
}

fn seed_key(c: &CandidateEstimate) -> (usize, usize) {
    (c.seed.p_index, c.seed.q_index)
}

/// Greedy non-maximum suppression over candidate poses. Returns one
/// hypothesis per surviving cluster, ordered by descending global inlier
/// count (ties by ascending seed).
pub fn nms_select(
    candidates: &[CandidateEstimate],
    p_dense: &[Point3],
    q_dense: &[Point3],
    cfg: &SelectionConfig,
) -> Vec<PoseHypothesis> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let corr_lists: Vec<&[Correspondence]> = candidates
        .iter()
        .map(|c| c.correspondences.as_slice())
        .collect();
    let global = dedupe_union(&corr_lists);
    let model_samples = sample_model(p_dense, cfg.similarity_samples);

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let counts: Vec<usize> = candidates
        .iter()
        .map(|c| global_inlier_stats(&c.pose, &global, p_dense, q_dense, cfg.inlier_radius).0)
        .collect();
    order.sort_by(|&a, &b| {
        counts[b]
            .cmp(&counts[a])
            .then(seed_key(&candidates[a]).cmp(&seed_key(&candidates[b])))
    });

    let mut consumed = vec![false; candidates.len()];
    let mut hypotheses = Vec::new();
    for &leader in &order {
        if consumed[leader] {
            continue;
        }
        consumed[leader] = true;
        let mut group = vec![leader];
        for &other in &order {
            if consumed[other] {
                continue;
            }
            let sim = pose_similarity(
                &candidates[leader].pose,
                &candidates[other].pose,
                &model_samples,
                cfg.model_diameter,
            );
            if sim >= cfg.merge_similarity {
                consumed[other] = true;
                group.push(other);
            }
        }
        let group_lists: Vec<&[Correspondence]> = group
            .iter()
            .map(|&i| candidates[i].correspondences.as_slice())
            .collect();
        let merged = dedupe_union(&group_lists);
        let pairs: Vec<(Point3, Point3)> = merged
            .iter()
            .map(|c| (p_dense[c.p_index], q_dense[c.q_index]))
            .collect();
        let weights: Vec<f64> = merged.iter().map(|c| c.weight).collect();
        let resolved = weighted_svd(&pairs, &weights).unwrap_or(candidates[leader].pose);
        let refined = refine_pose(
            &resolved,
            &merged,
            p_dense,
            q_dense,
            cfg.inlier_radius,
            cfg.refine_iterations,
        );
        let (inlier_count, inlier_ratio) =
            global_inlier_stats(&refined, &global, p_dense, q_dense, cfg.inlier_radius);
        hypotheses.push(PoseHypothesis {
            pose: refined,
            seed: candidates[leader].seed,
            correspondences: merged,
            inlier_count,
            inlier_ratio,
        });
    }

    hypotheses.sort_by(|a, b| {
        b.inlier_count
            .cmp(&a.inlier_count)
            .then((a.seed.p_index, a.seed.q_index).cmp(&(b.seed.p_index, b.seed.q_index)))
    });
    // Refinement can converge distinct clusters onto the same pose; suppress
    // those so the survivors are pairwise dissimilar.
    let mut kept: Vec<PoseHypothesis> = Vec::new();
    for h in hypotheses {
        let duplicate = kept.iter().any(|k| {
            pose_similarity(&k.pose, &h.pose, &model_samples, cfg.model_diameter)
                >= cfg.merge_similarity
        });
        if !duplicate {
            kept.push(h);
        }
    }
    let max_count = kept.iter().map(|h| h.inlier_count).max().unwrap_or(0);
    kept.retain(|h| (h.inlier_count as f64) >= cfg.min_count_ratio * max_count as f64);
    kept
}
