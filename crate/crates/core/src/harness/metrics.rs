//! Registration metrics: instance-level recall/precision/F1 via greedy
//! one-to-one pose assignment, correspondence inlier ratio, and mask mean-IoU.

use super::HarnessError;
use crate::attention::InstanceMask;
use crate::geometry::{
    add_distance, add_s_distance, cloud_diameter, rre_rte, Correspondence, Point3, RigidTransform,
};
use serde::{Deserialize, Serialize};

/// Success thresholds for counting a predicted pose as a correct registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalThresholds {
    /// Maximum relative rotation error, degrees (non-symmetric models).
    pub rre_limit_deg: f64,
    /// Maximum translation error, model units (non-symmetric models).
    pub rte_limit: f64,
    /// Symmetric models: ADD-S must be at most this fraction of the model diameter.
    pub add_s_factor: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            rre_limit_deg: 15.0,
            rte_limit: 0.1,
            add_s_factor: 0.1,
        }
    }
}

/// Outcome of one ground-truth instance after assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEvaluation {
    /// Index into the ground-truth pose list.
    pub gt_index: usize,
    /// Index of the prediction assigned to this instance, if any.
    pub predicted_index: Option<usize>,
    /// Rotation error in degrees (absent when unmatched).
    pub rre_degrees: Option<f64>,
    /// Translation error in model units (absent when unmatched).
    pub rte: Option<f64>,
    /// Index-matched average model distance between the two poses.
    pub add: Option<f64>,
    /// Nearest-point average model distance between the two poses.
    pub add_s: Option<f64>,
    /// Whether the assigned prediction passed the success thresholds.
    pub successful: bool,
}

/// Aggregate scores for one registered scene.
///
/// `inlier_ratio` and `mask_miou` describe the correspondence/mask stage and are
/// filled by the pipeline when that information exists; [`evaluate`] leaves them 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of ground-truth instances registered successfully.
    pub mean_recall: f64,
    /// Fraction of predictions that register an instance successfully.
    pub mean_precision: f64,
    /// Harmonic mean of recall and precision (0 when both are 0).
    pub mean_f1: f64,
    /// Fraction of extracted correspondences within the inlier radius of some
    /// ground-truth pose.
    pub inlier_ratio: f64,
    /// Mean IoU of the predicted neighbour masks against ground truth.
    pub mask_miou: f64,
    /// One row per ground-truth instance.
    pub per_instance: Vec<InstanceEvaluation>,
    /// Wall-clock pipeline runtime; 0 outside the pipeline.
    pub runtime_seconds: f64,
}

impl MetricsReport {
    /// Harmonic mean `2ab / (a + b)`, 0 when the denominator vanishes.
    pub fn f1(recall: f64, precision: f64) -> f64 {
        if recall + precision > 0.0 {
            2.0 * recall * precision / (recall + precision)
        } else {
            0.0
        }
    }
}

/// Scores predicted poses against ground truth.
///
/// Predictions are assigned to ground-truth instances greedily by ascending ADD
/// (ties by prediction index, then ground-truth index); each side is used at most
/// once. A matched pair succeeds when `RRE <= rre_limit_deg` and `RTE <= rte_limit`,
/// or, for `symmetric` models, when `ADD-S <= add_s_factor * diameter(model)`.
/// Unmatched predictions count against precision, unmatched instances against
/// recall.
pub fn evaluate(
    predictions: &[RigidTransform],
    gt_poses: &[RigidTransform],
    model: &[Point3],
    thresholds: &EvalThresholds,
    symmetric: bool,
) -> MetricsReport {
    let n_pred = predictions.len();
    let n_gt = gt_poses.len();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n_pred * n_gt);
    for (i, pred) in predictions.iter().enumerate() {
        for (k, gt) in gt_poses.iter().enumerate() {
            pairs.push((add_distance(pred, gt, model), i, k));
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("ADD is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut pred_used = vec![false; n_pred];
    let mut assigned: Vec<Option<(usize, f64)>> = vec![None; n_gt];
    for &(add, i, k) in &pairs {
        if !pred_used[i] && assigned[k].is_none() {
            pred_used[i] = true;
            assigned[k] = Some((i, add));
        }
    }

    let add_s_limit = thresholds.add_s_factor * cloud_diameter(model);
    let mut successes = 0usize;
    let per_instance: Vec<InstanceEvaluation> = assigned
        .iter()
        .enumerate()
        .map(|(k, slot)| match *slot {
            Some((i, add)) => {
                let (rre, rte) = rre_rte(&predictions[i], &gt_poses[k]);
                let add_s = add_s_distance(&predictions[i], &gt_poses[k], model);
                let successful = if symmetric {
                    add_s <= add_s_limit
                } else {
                    rre <= thresholds.rre_limit_deg && rte <= thresholds.rte_limit
                };
                successes += usize::from(successful);
                InstanceEvaluation {
                    gt_index: k,
                    predicted_index: Some(i),
                    rre_degrees: Some(rre),
                    rte: Some(rte),
                    add: Some(add),
                    add_s: Some(add_s),
                    successful,
                }
            }
            None => InstanceEvaluation {
                gt_index: k,
                predicted_index: None,
                rre_degrees: None,
                rte: None,
                add: None,
                add_s: None,
                successful: false,
            },
        })
        .collect();

    let ratio = |num: usize, den: usize| {
        if den > 0 {
            num as f64 / den as f64
        } else {
            0.0
        }
    };
    let mean_recall = ratio(successes, n_gt);
    let mean_precision = ratio(successes, n_pred);
    MetricsReport {
        mean_recall,
        mean_precision,
        mean_f1: MetricsReport::f1(mean_recall, mean_precision),
        inlier_ratio: 0.0,
        mask_miou: 0.0,
        per_instance,
        runtime_seconds: 0.0,
    }
}

/// Fraction of correspondences within `tau1` (strictly) of their position under
/// the nearest ground-truth pose.
pub fn inlier_ratio_metric(
    correspondences: &[Correspondence],
    p_dense: &[Point3],
    q_dense: &[Point3],
    gt_poses: &[RigidTransform],
    tau1: f64,
) -> Result<f64, HarnessError> {
    if correspondences.is_empty() {
        return Err(HarnessError::EmptyCorrespondences);
    }
    let mut inliers = 0usize;
    for c in correspondences {
        let p = p_dense.get(c.p_index).ok_or_else(|| {
            HarnessError::ShapeMismatch(format!(
                "correspondence references model point {} of {}",
                c.p_index,
                p_dense.len()
            ))
        })?;
        let q = q_dense.get(c.q_index).ok_or_else(|| {
            HarnessError::ShapeMismatch(format!(
                "correspondence references scene point {} of {}",
                c.q_index,
                q_dense.len()
            ))
        })?;
        let residual = gt_poses
            .iter()
            .map(|t| (t.apply(p) - q).norm())
            .fold(f64::INFINITY, f64::min);
        inliers += usize::from(residual < tau1);
    }
    Ok(inliers as f64 / correspondences.len() as f64)
}

/// Mean over anchors of `|pred AND gt| / |pred OR gt|` between the predicted
/// neighbour mask and ground-truth co-membership rows. Anchors where both rows
/// are empty contribute 1.
pub fn mask_miou(pred: &InstanceMask, gt: &[Vec<bool>]) -> Result<f64, HarnessError> {
    if pred.allowed.len() != gt.len() {
        return Err(HarnessError::ShapeMismatch(format!(
            "mask has {} anchors, ground truth has {}",
            pred.allowed.len(),
            gt.len()
        )));
    }
    if pred.allowed.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (i, (row, gt_row)) in pred.allowed.iter().zip(gt).enumerate() {
        if row.len() != gt_row.len() {
            return Err(HarnessError::ShapeMismatch(format!(
                "anchor {i}: mask row has {} slots, ground truth has {}",
                row.len(),
                gt_row.len()
            )));
        }
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in row.iter().zip(gt_row) {
            inter += usize::from(p && g);
            union += usize::from(p || g);
        }
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / pred.allowed.len() as f64)
}
