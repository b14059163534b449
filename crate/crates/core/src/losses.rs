//! Evaluable training objectives: an overlap-weighted circle loss over
//! superpoint features, a negative log-likelihood on transport assignments,
//! and a binary-cross-entropy-plus-dice objective for instance-mask
//! confidences. These are pure scalar functions used for fixture
//! verification; no gradients or training loops exist here.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::attention::FeatureMatrix;

/// Margins and scale of the circle loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Positive margin: positives at exactly this feature distance contribute
    /// a unit term.
    pub delta_p: f64,
    /// Negative margin, strictly larger than `delta_p`.
    pub delta_n: f64,
    /// Scale of the adaptive exponent weights.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta_p: 0.1,
            delta_n: 1.4,
            gamma: 10.0,
        }
    }
}

/// Errors from loss evaluation.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    /// An anchor was given no positive examples.
    #[error("anchor {anchor} has no positives")]
    NoPositives { anchor: usize },
    /// An anchor was given no negative examples.
    #[error("anchor {anchor} has no negatives")]
    NoNegatives { anchor: usize },
    /// A referenced row or column does not exist.
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    /// Prediction and target vectors differ in length.
    #[error("prediction has {pred} entries, target has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
}

/// One anchor row with its positive matches (and their overlap ratios) and
/// negative matches, all indexing rows of the opposite feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleAnchor {
    pub anchor: usize,
    /// `(row, overlap)` pairs; the positive term is weighted by
    /// `sqrt(overlap)`.
    pub positives: Vec<(usize, f64)>,
    pub negatives: Vec<usize>,
}

fn row_distance(a: &FeatureMatrix, i: usize, b: &FeatureMatrix, j: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..a.ncols() {
        let d = a[(i, c)] - b[(j, c)];
        sum += d * d;
    }
    sum.sqrt()
}

/// Overlap-weighted circle loss: the mean over anchors of
/// `ln(1 + S_pos * S_neg)` where `S_pos` sums `exp(sqrt(o) * g * (d - dp)^2)`
/// over positives and `S_neg` sums `exp(g * (dn - d)^2)` over negatives, with
/// `d` the feature distance between the anchor row of `feats_a` and the
/// referenced row of `feats_b`. The exponent weights are the signed margins
/// scaled by `gamma`, applied without clipping, so both exponents are the
/// squared margin violation. Positives at exactly `delta_p` and negatives at
/// exactly `delta_n` each contribute a factor of one.
///
/// An empty anchor list yields zero.
pub fn circle_loss(
    feats_a: &FeatureMatrix,
    feats_b: &FeatureMatrix,
    anchors: &[CircleAnchor],
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let mut total = 0.0;
    for a in anchors {
        if a.anchor >= feats_a.nrows() {
            return Err(LossError::IndexOutOfRange {
                what: "anchor",
                index: a.anchor,
                limit: feats_a.nrows(),
            });
        }
        if a.positives.is_empty() {
            return Err(LossError::NoPositives { anchor: a.anchor });
        }
        if a.negatives.is_empty() {
            return Err(LossError::NoNegatives { anchor: a.anchor });
        }
        let mut s_pos = 0.0;
        for &(j, overlap) in &a.positives {
            if j >= feats_b.nrows() {
                return Err(LossError::IndexOutOfRange {
                    what: "positive",
                    index: j,
                    limit: feats_b.nrows(),
                });
            }
            let d = row_distance(feats_a, a.anchor, feats_b, j);
            let margin = d - cfg.delta_p;
            s_pos += (overlap.sqrt() * cfg.gamma * margin * margin).exp();
        }
        let mut s_neg = 0.0;
        for &j in &a.negatives {
            if j >= feats_b.nrows() {
                return Err(LossError::IndexOutOfRange {
                    what: "negative",
                    index: j,
                    limit: feats_b.nrows(),
                });
            }
            let d = row_distance(feats_a, a.anchor, feats_b, j);
            let margin = cfg.delta_n - d;
            s_neg += (cfg.gamma * margin * margin).exp();
        }
        total += (1.0 + s_pos * s_neg).ln();
    }
    if anchors.is_empty() {
        Ok(0.0)
    } else {
        Ok(total / anchors.len() as f64)
    }
}

/// Negative log-likelihood of a ground-truth assignment under a transport
/// plan with an unmatched row and column appended. Sums `-ln` of the plan at
/// every ground-truth `(row, col)` pair, at `(row, last_col)` for rows known
/// to be unmatched, and at `(last_row, col)` for unmatched columns. Zero
/// exactly when every referenced entry is one.
pub fn nll_matching_loss(
    assignment: &DMatrix<f64>,
    gt_pairs: &[(usize, usize)],
    unmatched_rows: &[usize],
    unmatched_cols: &[usize],
) -> Result<f64, LossError> {
    let real_rows = assignment.nrows().saturating_sub(1);
    let real_cols = assignment.ncols().saturating_sub(1);
    let mut loss = 0.0;
    for &(x, y) in gt_pairs {
        if x >= real_rows {
            return Err(LossError::IndexOutOfRange {
                what: "pair row",
                index: x,
                limit: real_rows,
            });
        }
        if y >= real_cols {
            return Err(LossError::IndexOutOfRange {
                what: "pair col",
                index: y,
                limit: real_cols,
            });
        }
        loss -= assignment[(x, y)].ln();
    }
    for &x in unmatched_rows {
        if x >= real_rows {
            return Err(LossError::IndexOutOfRange {
                what: "unmatched row",
                index: x,
                limit: real_rows,
            });
        }
        loss -= assignment[(x, real_cols)].ln();
    }
    for &y in unmatched_cols {
        if y >= real_cols {
            return Err(LossError::IndexOutOfRange {
                what: "unmatched col",
                index: y,
                limit: real_cols,
            });
        }
        loss -= assignment[(real_rows, y)].ln();
    }
    Ok(loss)
}

/// Binary cross-entropy (mean over entries) plus a Laplace-smoothed dice
/// term: `1 - 2 * (pred . gt + 1) / (sum(pred) + sum(gt) + 1)` with sums as
/// soft cardinalities. The smoothing makes the dice term `-1` when both
/// vectors are all zero; it always lies in `[-1, 1]`.
pub fn mask_loss(pred: &[f64], gt: &[bool]) -> Result<f64, LossError> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut bce = 0.0;
    let mut dot = 0.0;
    let mut sum_pred = 0.0;
    let mut sum_gt = 0.0;
    for (&p, &y) in pred.iter().zip(gt) {
        // Branch instead of the y*ln(p) form so that an exact prediction of
        // an extreme target stays finite (0 * ln 0 would be NaN).
        bce -= if y { p.ln() } else { (1.0 - p).ln() };
        sum_pred += p;
        if y {
            dot += p;
            sum_gt += 1.0;
        }
    }
    if !pred.is_empty() {
        bce /= pred.len() as f64;
    }
    let dice = 1.0 - 2.0 * (dot + 1.0) / (sum_pred + sum_gt + 1.0);
    Ok(bce + dice)
}
