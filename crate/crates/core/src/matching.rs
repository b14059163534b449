//! Correspondence extraction between a model and a scene.
//!
//! Refined superpoint features are matched by cosine similarity to produce
//! seed pairs. Each seed grows into an instance candidate: the dense points
//! of the model neighborhood around the seed's model superpoint, and the
//! dense points of the scene neighborhood filtered by the instance mask.
//! Dense features inside a candidate are matched with an entropic optimal
//! transport solve (a score matrix with an appended unmatched row/column,
//! normalized alternately in log space), correspondences are read off by
//! mutual top-k selection, and each candidate's pose is estimated by a
//! weighted orthogonal fit over its correspondences.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::attention::{FeatureMatrix, InstanceMask};
use crate::geometry::{weighted_svd, Correspondence, GeometryError, Point3, RigidTransform};
use crate::preprocess::SuperpointGraph;

/// Errors from match extraction and candidate pose estimation.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MatchingError {
    /// Fewer correspondences than a rigid fit needs.
    #[error("candidate has {found} correspondences, needs at least {needed}")]
    TooFewCorrespondences { found: usize, needed: usize },
    /// The correspondence geometry does not pin down a pose.
    #[error("candidate correspondences are geometrically degenerate")]
    DegenerateCandidate,
    /// Inconsistent input dimensions.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One matched pair of superpoints with its similarity score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperpointCorrespondence {
    pub p_index: usize,
    pub q_index: usize,
    pub score: f64,
}

/// Dense-point support of one instance hypothesis grown from a seed pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceCandidate {
    pub p_index: usize,
    pub q_index: usize,
    /// Dense model point indices near the seed's model superpoint.
    pub p_points: Vec<usize>,
    /// Dense scene point indices near the seed's scene superpoint, restricted
    /// to mask-allowed neighborhood slots.
    pub q_points: Vec<usize>,
}

/// A candidate with extracted correspondences and its estimated pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEstimate {
    pub seed: SuperpointCorrespondence,
    /// Dense-level correspondences; indices refer to the full dense clouds.
    pub correspondences: Vec<Correspondence>,
    pub pose: RigidTransform,
}

/// Tunables of the correspondence stage.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateConfig {
    /// Maximum number of seed superpoint pairs kept.
    pub max_superpoint_matches: usize,
    /// Maximum dense points gathered per candidate side.
    pub point_cap: usize,
    /// Normalization sweeps of the transport solve.
    pub sinkhorn_iterations: usize,
    /// Score assigned to the unmatched row and column.
    pub dustbin_slack: f64,
    /// Mutual top-k neighborhood for accepting a correspondence.
    pub mutual_top_k: usize,
    /// Minimum correspondences for a candidate to produce a pose.
    pub min_correspondences: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            max_superpoint_matches: 128,
            point_cap: 256,
            sinkhorn_iterations: 100,
            dustbin_slack: 1.0,
            mutual_top_k: 3,
            min_correspondences: 3,
        }
    }
}

fn normalized_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

/// Matches superpoints by cosine similarity of their refined features and
/// keeps the `limit` best pairs, ordered by descending score with ties broken
/// by ascending model then scene index. Zero feature rows score zero against
/// everything.
pub fn superpoint_match(
    z_p: &FeatureMatrix,
    z_q: &FeatureMatrix,
    limit: usize,
) -> Result<Vec<SuperpointCorrespondence>, MatchingError> {
    if z_p.ncols() != z_q.ncols() {
        return Err(MatchingError::ShapeMismatch(format!(
            "feature widths differ: {} vs {}",
            z_p.ncols(),
            z_q.ncols()
        )));
    }
    let np = normalized_rows(z_p);
    let nq = normalized_rows(z_q);
    let sims = &np * nq.transpose();
    let mut pairs: Vec<SuperpointCorrespondence> = Vec::with_capacity(sims.len());
    for i in 0..sims.nrows() {
        for j in 0..sims.ncols() {
            pairs.push(SuperpointCorrespondence {
                p_index: i,
                q_index: j,
                score: sims[(i, j)],
            });
        }
    }
    pairs.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.p_index.cmp(&b.p_index))
            .then(a.q_index.cmp(&b.q_index))
    });
    pairs.truncate(limit);
    Ok(pairs)
}

fn gather_side(
    graph: &SuperpointGraph,
    anchor: usize,
    allowed: Option<&[bool]>,
    dense: &[Point3],
    cap: usize,
) -> Vec<usize> {
    let center = graph.superpoints[anchor];
    let mut points: Vec<usize> = Vec::new();
    for (c, &node) in graph.knn[anchor].iter().enumerate() {
        if let Some(mask_row) = allowed {
            if !mask_row[c] {
                continue;
            }
        }
        points.extend_from_slice(graph.members_of(node));
    }
    points.sort_by(|&a, &b| {
        let da = (dense[a] - center).norm_squared();
        let db = (dense[b] - center).norm_squared();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    points.truncate(cap);
    points
}

/// Grows the dense-point support of a seed pair: every patch in the model
/// neighborhood of `seed.p_index`, and the mask-allowed patches in the scene
/// neighborhood of `seed.q_index`. Each side is clipped to `cap` points,
/// keeping those closest to the seed superpoint (ties to the lower index).
pub fn expand_candidate(
    seed: &SuperpointCorrespondence,
    p_graph: &SuperpointGraph,
    q_graph: &SuperpointGraph,
    mask: &InstanceMask,
    p_dense: &[Point3],
    q_dense: &[Point3],
    cap: usize,
) -> Result<InstanceCandidate, MatchingError> {
    if seed.p_index >= p_graph.len() || seed.q_index >= q_graph.len() {
        return Err(MatchingError::ShapeMismatch(format!(
            "seed ({}, {}) outside graphs of {} and {} superpoints",
            seed.p_index,
            seed.q_index,
            p_graph.len(),
            q_graph.len()
        )));
    }
    if mask.allowed.len() != q_graph.len() {
        return Err(MatchingError::ShapeMismatch(format!(
            "mask covers {} anchors, scene graph has {}",
            mask.allowed.len(),
            q_graph.len()
        )));
    }
    let mask_row = &mask.allowed[seed.q_index];
    if mask_row.len() != q_graph.knn[seed.q_index].len() {
        return Err(MatchingError::ShapeMismatch(format!(
            "mask row has {} slots, scene neighborhood has {}",
            mask_row.len(),
            q_graph.knn[seed.q_index].len()
        )));
    }
    Ok(InstanceCandidate {
        p_index: seed.p_index,
        q_index: seed.q_index,
        p_points: gather_side(p_graph, seed.p_index, None, p_dense, cap),
        q_points: gather_side(q_graph, seed.q_index, Some(mask_row), q_dense, cap),
    })
}

/// Entropic optimal transport over a feature-similarity score matrix with an
/// appended unmatched row and column valued `slack`. Returns the
/// `(m+1) x (n+1)` transport plan after `iterations` alternating row/column
/// normalizations in log space. Target marginals: every real row and column
/// carries mass one; the unmatched row absorbs up to `n`, the unmatched
/// column up to `m`.
pub fn sinkhorn_match(
    feat_p: &FeatureMatrix,
    feat_q: &FeatureMatrix,
    iterations: usize,
    slack: f64,
) -> Result<DMatrix<f64>, MatchingError> {
    if feat_p.ncols() != feat_q.ncols() {
        return Err(MatchingError::ShapeMismatch(format!(
            "feature widths differ: {} vs {}",
            feat_p.ncols(),
            feat_q.ncols()
        )));
    }
    let m = feat_p.nrows();
    let n = feat_q.nrows();
    if m == 0 || n == 0 {
        return Ok(DMatrix::zeros(m + 1, n + 1));
    }
    let scale = 1.0 / (feat_p.ncols() as f64).sqrt();
    let mut scores = DMatrix::zeros(m + 1, n + 1);
    let raw = feat_p * feat_q.transpose();
    for i in 0..m {
        for j in 0..n {
            scores[(i, j)] = raw[(i, j)] * scale;
        }
    }
    for j in 0..=n {
        scores[(m, j)] = slack;
    }
    for i in 0..m {
        scores[(i, n)] = slack;
    }

    let mut log_a = vec![0.0f64; m + 1];
    log_a[m] = (n as f64).ln();
    let mut log_b = vec![0.0f64; n + 1];
    log_b[n] = (m as f64).ln();

    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let lse = |acc: &mut Vec<f64>| -> f64 {
        let max = acc.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        max + acc.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
    };
    let mut buf = Vec::with_capacity(m.max(n) + 1);
    for _ in 0..iterations {
        for i in 0..=m {
            buf.clear();
            buf.extend((0..=n).map(|j| scores[(i, j)] + v[j]));
            u[i] = log_a[i] - lse(&mut buf);
        }
        for j in 0..=n {
            buf.clear();
            buf.extend((0..=m).map(|i| scores[(i, j)] + u[i]));
            v[j] = log_b[j] - lse(&mut buf);
        }
    }
    let mut plan = DMatrix::zeros(m + 1, n + 1);
    for i in 0..=m {
        for j in 0..=n {
            plan[(i, j)] = (scores[(i, j)] + u[i] + v[j]).exp();
        }
    }
    Ok(plan)
}

/// Reads correspondences from a transport plan: pair `(i, j)` of the real
/// `m x n` block is kept when `j` is among row `i`'s `k` largest entries and
/// `i` among column `j`'s, with the plan value as the weight. Output is
/// ordered by `(i, j)`.
pub fn mutual_correspondences(plan: &DMatrix<f64>, k: usize) -> Vec<Correspondence> {
    let m = plan.nrows().saturating_sub(1);
    let n = plan.ncols().saturating_sub(1);
    if m == 0 || n == 0 || k == 0 {
        return Vec::new();
    }
    let top_of_row: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let mut js: Vec<usize> = (0..n).collect();
            js.sort_by(|&a, &b| plan[(i, b)].total_cmp(&plan[(i, a)]).then(a.cmp(&b)));
            js.truncate(k);
            js
        })
        .collect();
    let top_of_col: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let mut is: Vec<usize> = (0..m).collect();
            is.sort_by(|&a, &b| plan[(b, j)].total_cmp(&plan[(a, j)]).then(a.cmp(&b)));
            is.truncate(k);
            is
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..m {
        for &j in &top_of_row[i] {
            if top_of_col[j].contains(&i) {
                out.push(Correspondence {
                    p_index: i,
                    q_index: j,
                    weight: plan[(i, j)],
                });
            }
        }
    }
    out.sort_by(|a, b| (a.p_index, a.q_index).cmp(&(b.p_index, b.q_index)));
    out
}

/// Weighted rigid fit over a candidate's correspondences. Indices refer to
/// the full dense clouds.
pub fn candidate_pose(
    correspondences: &[Correspondence],
    p_dense: &[Point3],
    q_dense: &[Point3],
    min_correspondences: usize,
) -> Result<RigidTransform, MatchingError> {
    if correspondences.len() < min_correspondences.max(3) {
        return Err(MatchingError::TooFewCorrespondences {
            found: correspondences.len(),
            needed: min_correspondences.max(3),
        });
    }
    let pairs: Vec<(Point3, Point3)> = correspondences
        .iter()
        .map(|c| (p_dense[c.p_index], q_dense[c.q_index]))
        .collect();
    let weights: Vec<f64> = correspondences.iter().map(|c| c.weight).collect();
    weighted_svd(&pairs, &weights).map_err(|e| match e {
        GeometryError::DegenerateConfiguration => MatchingError::DegenerateCandidate,
        GeometryError::NotARotation => MatchingError::DegenerateCandidate,
    })
}

fn gather_features(feats: &FeatureMatrix, indices: &[usize]) -> FeatureMatrix {
    DMatrix::from_fn(indices.len(), feats.ncols(), |r, c| feats[(indices[r], c)])
}

/// Runs the full per-seed candidate stage: expansion, transport matching,
/// mutual selection, and pose estimation. Seeds whose candidates end up with
/// too few or degenerate correspondences are dropped.
#[allow(clippy::too_many_arguments)]
pub fn estimate_candidates(
    seeds: &[SuperpointCorrespondence],
    p_graph: &SuperpointGraph,
    q_graph: &SuperpointGraph,
    mask: &InstanceMask,
    p_dense: &[Point3],
    q_dense: &[Point3],
    p_feats: &FeatureMatrix,
    q_feats: &FeatureMatrix,
    cfg: &CandidateConfig,
) -> Result<Vec<CandidateEstimate>, MatchingError> {
    if p_feats.nrows() != p_dense.len() || q_feats.nrows() != q_dense.len() {
        return Err(MatchingError::ShapeMismatch(format!(
            "dense features cover {}/{} points, clouds have {}/{}",
            p_feats.nrows(),
            q_feats.nrows(),
            p_dense.len(),
            q_dense.len()
        )));
    }
    let mut out = Vec::new();
    for seed in seeds {
        let cand = expand_candidate(
            seed,
            p_graph,
            q_graph,
            mask,
            p_dense,
            q_dense,
            cfg.point_cap,
        )?;
        if cand.p_points.is_empty() || cand.q_points.is_empty() {
            continue;
        }
        let fp = gather_features(p_feats, &cand.p_points);
        let fq = gather_features(q_feats, &cand.q_points);
        let plan = sinkhorn_match(&fp, &fq, cfg.sinkhorn_iterations, cfg.dustbin_slack)?;
        let local = mutual_correspondences(&plan, cfg.mutual_top_k);
        let correspondences: Vec<Correspondence> = local
            .into_iter()
            .map(|c| Correspondence {
                p_index: cand.p_points[c.p_index],
                q_index: cand.q_points[c.q_index],
                weight: c.weight,
            })
            .collect();
        match candidate_pose(&correspondences, p_dense, q_dense, cfg.min_correspondences) {
            Ok(pose) => out.push(CandidateEstimate {
                seed: *seed,
                correspondences,
                pose,
            }),
            Err(MatchingError::TooFewCorrespondences { .. })
            | Err(MatchingError::DegenerateCandidate) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
