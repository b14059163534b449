//! Rigid-body poses, weighted least-squares alignment and pose-error measures.
//!
//! The central operation is [`weighted_svd`], a weighted orthogonal Procrustes solver:
//! given paired points and non-negative weights it returns the rigid transform
//! minimising the weighted sum of squared residuals.  Pose distances ([`add_distance`],
//! [`add_s_distance`], [`rre_rte`]) compare two transforms through their action on a
//! model point set rather than through parameter differences.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3-D point with finite `f64` components.
pub type Point3 = nalgebra::Point3<f64>;

/// Tolerance for rotation-matrix validity checks (orthonormality, determinant).
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeometryError {
    /// Fewer than 3 positively weighted pairs, or the weighted cross-covariance has
    /// rank < 2, so the rotation is not uniquely determined.
    #[error("degenerate configuration: alignment is under-determined")]
    DegenerateConfiguration,
    /// A matrix failed the rotation invariants (orthonormal, det = +1).
    #[error("matrix is not a rotation within tolerance")]
    NotARotation,
}

/// Rigid motion `p -> R p + t` with `R` orthonormal and `det R = +1`.
///
/// Serialises as `{"rotation": [9 floats row-major], "translation": [3 floats]}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform after checking the rotation invariants within [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let t = Self {
            rotation,
            translation,
        };
        if t.is_valid(ROTATION_TOL) {
            Ok(t)
        } else {
            Err(GeometryError::NotARotation)
        }
    }

    /// `R^T R = I` and `det R = 1`, both within `tol`; all entries finite.
    pub fn is_valid(&self, tol: f64) -> bool {
        let finite = self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        let gram = self.rotation.transpose() * self.rotation;
        let ortho = (gram - Matrix3::identity()).norm() <= tol * 3.0;
        let det = (self.rotation.determinant() - 1.0).abs() <= tol * 3.0;
        finite && ortho && det
    }

    /// Applies the motion: `R p + t`.
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Composition acting as `self` after `other`: `(self.compose(other)).apply(p) ==
    /// self.apply(other.apply(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation about a unit axis by `angle` radians (Rodrigues), plus translation.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation =
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle)
                .into_inner();
        Self {
            rotation,
            translation,
        }
    }
}

/// Flat JSON form: rotation row-major.
#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        let repr = RigidTransformRepr {
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
            translation: [self.translation.x, self.translation.y, self.translation.z],
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = RigidTransformRepr::deserialize(d)?;
        let m = repr.rotation;
        Ok(RigidTransform {
            rotation: Matrix3::new(m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8]),
            translation: Vector3::new(
                repr.translation[0],
                repr.translation[1],
                repr.translation[2],
            ),
        })
    }
}

/// A putative point match: indices into the model / scene dense clouds plus a
/// non-negative confidence used as a least-squares weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub p_index: usize,
    pub q_index: usize,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(p_index: usize, q_index: usize, weight: f64) -> Self {
        Self {
            p_index,
            q_index,
            weight,
        }
    }
}

/// Weighted orthogonal Procrustes: the rigid transform minimising
/// `sum_i w_i ||R p_i + t - q_i||^2`.
///
/// Pairs with weight exactly `0.0` are skipped entirely, so adding them can never
/// change the result.  Fails with [`GeometryError::DegenerateConfiguration`] when fewer
/// than 3 pairs have positive weight or the weighted cross-covariance has rank < 2
/// (e.g. collinear points), which leaves the rotation under-determined.
///
/// Panics if `pairs` and `weights` have different lengths.
pub fn weighted_svd(
    pairs: &[(Point3, Point3)],
    weights: &[f64],
) -> Result<RigidTransform, GeometryError> {
    assert_eq!(pairs.len(), weights.len(), "one weight per correspondence");
    let mut total = 0.0;
    let mut effective = 0usize;
    let mut p_sum = Vector3::zeros();
    let mut q_sum = Vector3::zeros();
    for ((p, q), &w) in pairs.iter().zip(weights) {
        debug_assert!(w >= 0.0, "weights must be non-negative");
        if w == 0.0 {
            continue;
        }
        effective += 1;
        total += w;
        p_sum += w * p.coords;
        q_sum += w * q.coords;
    }
    if effective < 3 || total <= 0.0 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let p_bar = p_sum / total;
    let q_bar = q_sum / total;

    // H = sum w (p - p_bar)(q - q_bar)^T; R = V diag(1,1,det(VU^T)) U^T for H = U S V^T.
    let mut h = Matrix3::zeros();
    for ((p, q), &w) in pairs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        h += w * (p.coords - p_bar) * (q.coords - q_bar).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[0] <= 0.0 || sv[1] <= sv[0] * 1e-12 {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let u = svd.u.ok_or(GeometryError::DegenerateConfiguration)?;
    let v_t = svd.v_t.ok_or(GeometryError::DegenerateConfiguration)?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let correction =
        Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let rotation = v * correction * u.transpose();
    let translation = q_bar - rotation * p_bar;
    Ok(RigidTransform {
        rotation,
        translation,
    })
}

/// Relative rotation error in degrees and translation error in model units.
///
/// `RRE = arccos(clamp((trace(Ra^T Rb) - 1) / 2, -1, 1))`, `RTE = ||ta - tb||`.
pub fn rre_rte(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    let c = ((a.rotation.transpose() * b.rotation).trace() - 1.0) / 2.0;
    let rre = c.clamp(-1.0, 1.0).acos().to_degrees();
    let rte = (a.translation - b.translation).norm();
    (rre, rte)
}

/// Average distance between the two poses' images of the model (matched by index).
///
/// Panics on an empty model (the mean would be undefined).
pub fn add_distance(a: &RigidTransform, b: &RigidTransform, model: &[Point3]) -> f64 {
    assert!(!model.is_empty(), "ADD needs a non-empty model");
    let sum: f64 = model.iter().map(|p| (a.apply(p) - b.apply(p)).norm()).sum();
    sum / model.len() as f64
}

/// Symmetric variant of [`add_distance`]: each transformed point is matched to its
/// nearest neighbour in the other pose's image instead of the same index.
///
/// Always `<= add_distance` for the same arguments; zero when the two images coincide
/// as sets (e.g. a symmetric model rotated onto itself).
pub fn add_s_distance(a: &RigidTransform, b: &RigidTransform, model: &[Point3]) -> f64 {
    assert!(!model.is_empty(), "ADD-S needs a non-empty model");
    let image_b: Vec<Point3> = model.iter().map(|p| b.apply(p)).collect();
    let sum: f64 = model
        .iter()
        .map(|p| {
            let pa = a.apply(p);
            image_b
                .iter()
                .map(|qb| (pa - qb).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / model.len() as f64
}

/// Largest pairwise distance in a cloud; zero for fewer than two points.
pub fn cloud_diameter(points: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}
