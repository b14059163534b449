//! JSON-friendly flat records for poses and registration results.

use super::HarnessError;
use crate::geometry::RigidTransform;
use crate::selection::PoseHypothesis;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// One estimated pose: rotation as 9 row-major floats, translation as 3 floats,
/// plus the supporting-evidence counters attached by selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default)]
    pub inlier_count: usize,
    #[serde(default)]
    pub inlier_ratio: f64,
}

impl PoseRecord {
    pub fn from_pose(pose: &RigidTransform) -> Self {
        let r = &pose.rotation;
        Self {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [pose.translation.x, pose.translation.y, pose.translation.z],
            inlier_count: 0,
            inlier_ratio: 0.0,
        }
    }

    pub fn from_hypothesis(h: &PoseHypothesis) -> Self {
        Self {
            inlier_count: h.inlier_count,
            inlier_ratio: h.inlier_ratio,
            ..Self::from_pose(&h.pose)
        }
    }

    /// Rebuilds the rigid transform, validating orthonormality.
    pub fn to_pose(&self) -> Result<RigidTransform, HarnessError> {
        let r = &self.rotation;
        let rotation = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
        let translation = Vector3::new(
            self.translation[0],
            self.translation[1],
            self.translation[2],
        );
        RigidTransform::new(rotation, translation)
            .map_err(|e| HarnessError::Format(format!("pose record is not a rigid motion: {e}")))
    }
}

/// Serializes poses to the results JSON shape (a list of records).
pub fn poses_to_json(records: &[PoseRecord]) -> String {
    serde_json::to_string_pretty(records).expect("pose records serialize")
}

/// Parses a results JSON document back into records.
pub fn poses_from_json(text: &str) -> Result<Vec<PoseRecord>, HarnessError> {
    serde_json::from_str(text).map_err(|e| HarnessError::Format(format!("poses JSON: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trips_through_record_and_json() {
        let pose = RigidTransform::from_axis_angle(
            &Vector3::new(1.0, 2.0, -0.5).normalize(),
            0.83,
            Vector3::new(0.1, -0.2, 0.3),
        );
        let mut rec = PoseRecord::from_pose(&pose);
        rec.inlier_count = 17;
        rec.inlier_ratio = 0.42;
        let text = poses_to_json(std::slice::from_ref(&rec));
        let parsed = poses_from_json(&text).unwrap();
        assert_eq!(parsed, vec![rec.clone()]);
        let back = parsed[0].to_pose().unwrap();
        assert!((back.rotation - pose.rotation).abs().max() < 1e-15);
        assert!((back.translation - pose.translation).abs().max() < 1e-15);
    }

    #[test]
    fn rotation_layout_is_row_major() {
        let rotation = Matrix3::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0);
        // Not a rotation matrix; only the layout is under test here.
        let rec = PoseRecord {
            rotation: [0.0; 9],
            translation: [0.0; 3],
            inlier_count: 0,
            inlier_ratio: 0.0,
        };
        let mut rec = rec;
        for row in 0..3 {
            for col in 0..3 {
                rec.rotation[row * 3 + col] = rotation[(row, col)];
            }
        }
        assert_eq!(rec.rotation, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert!(
            rec.to_pose().is_err(),
            "non-orthonormal matrices are rejected"
        );
    }

    #[test]
    fn malformed_json_is_reported() {
        assert!(matches!(
            poses_from_json("[{\"rotation\": 3}]"),
            Err(HarnessError::Format(_))
        ));
    }
}
