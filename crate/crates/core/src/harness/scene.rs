//! Synthetic scene generation: procedural model primitives, seeded multi-instance
//! placement with pairwise separation, plane-cut occlusion, Gaussian noise and
//! uniform background clutter.

use super::records::PoseRecord;
use super::{ply, HarnessError};
use crate::geometry::{add_distance, cloud_diameter, Point3, RigidTransform};
use crate::preprocess::PointCloud;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Description of one synthetic scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// `"torus"`, `"helix"`, `"bracket"` (optionally `"name:points"`), or a path
    /// ending in `.ply`.
    pub model_source: String,
    /// Inclusive bounds for the number of placed instances.
    pub instance_range: (usize, usize),
    /// Standard deviation of per-coordinate Gaussian noise, model units.
    pub noise_sigma: f64,
    /// Fraction of each instance removed by a random plane cut, in `[0, 1)`.
    pub occlusion: f64,
    /// Uniform clutter points; `None` means 20% of the instance point total.
    pub background_points: Option<usize>,
    /// Seed controlling every random choice in the scene.
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            model_source: "torus".into(),
            instance_range: (4, 16),
            noise_sigma: 0.0,
            occlusion: 0.0,
            background_points: None,
            seed: 0,
        }
    }
}

/// Everything known about how a scene was generated.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Pose of each placed instance (model frame to scene frame).
    pub poses: Vec<RigidTransform>,
    /// Per scene point: instance number `1..=K`, or 0 for background.
    pub labels: Vec<i32>,
    /// Per scene point: the model point it was generated from, if any.
    pub origins: Vec<Option<usize>>,
    /// Per instance: fraction of model points that survived occlusion.
    pub overlap: Vec<f64>,
}

/// Serializable mirror of [`GroundTruth`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub poses: Vec<PoseRecord>,
    pub labels: Vec<i32>,
    /// `-1` encodes a background point with no generating model point.
    pub origins: Vec<i64>,
    pub overlap: Vec<f64>,
}

impl GroundTruth {
    pub fn to_file(&self) -> GroundTruthFile {
        GroundTruthFile {
            poses: self.poses.iter().map(PoseRecord::from_pose).collect(),
            labels: self.labels.clone(),
            origins: self
                .origins
                .iter()
                .map(|o| o.map_or(-1, |i| i as i64))
                .collect(),
            overlap: self.overlap.clone(),
        }
    }

    pub fn from_file(file: &GroundTruthFile) -> Result<Self, HarnessError> {
        let poses = file
            .poses
            .iter()
            .map(PoseRecord::to_pose)
            .collect::<Result<Vec<_>, _>>()?;
        if file.labels.len() != file.origins.len() {
            return Err(HarnessError::ShapeMismatch(format!(
                "{} labels but {} origins",
                file.labels.len(),
                file.origins.len()
            )));
        }
        let origins = file
            .origins
            .iter()
            .map(|&o| if o < 0 { None } else { Some(o as usize) })
            .collect();
        Ok(Self {
            poses,
            labels: file.labels.clone(),
            origins,
            overlap: file.overlap.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// Procedural models
// ---------------------------------------------------------------------------

/// Deterministic low-discrepancy pair sequence on the unit square.
fn r2_sequence(i: usize) -> (f64, f64) {
    const A1: f64 = 0.754_877_666_246_692_7;
    const A2: f64 = 0.569_840_290_998_053_2;
    ((i as f64 * A1).fract(), (i as f64 * A2).fract())
}

fn torus(n: usize) -> Vec<Point3> {
    let (major, minor) = (0.35, 0.13);
    (0..n)
        .map(|i| {
            let (a, b) = r2_sequence(i);
            let (u, v) = (std::f64::consts::TAU * a, std::f64::consts::TAU * b);
            let ring = major + minor * v.cos();
            Point3::new(ring * u.cos(), ring * u.sin(), minor * v.sin())
        })
        .collect()
}

fn helix(n: usize) -> Vec<Point3> {
    let (coil_radius, tube_radius, height, turns) = (0.22, 0.07, 0.8, 2.0);
    (0..n)
        .map(|i| {
            let t = i as f64 / (n.max(2) - 1) as f64;
            let theta = turns * std::f64::consts::TAU * t;
            let (a, _) = r2_sequence(i);
            let psi = std::f64::consts::TAU * a;
            let radial = Vector3::new(theta.cos(), theta.sin(), 0.0);
            let center = radial * coil_radius + Vector3::new(0.0, 0.0, height * (t - 0.5));
            let offset = radial * (tube_radius * psi.cos())
                + Vector3::new(0.0, 0.0, tube_radius * psi.sin());
            Point3::from(center + offset)
        })
        .collect()
}

fn bracket(n: usize) -> Vec<Point3> {
    // Two orthogonal plates forming an L profile; points sampled over all faces
    // of both boxes, proportionally to face area.
    struct Face {
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    }
    let mut faces = Vec::new();
    let mut add_box = |lo: Vector3<f64>, hi: Vector3<f64>| {
        let d = hi - lo;
        let (dx, dy, dz) = (
            Vector3::new(d.x, 0.0, 0.0),
            Vector3::new(0.0, d.y, 0.0),
            Vector3::new(0.0, 0.0, d.z),
        );
        faces.push(Face {
            origin: lo,
            u: dx,
            v: dy,
        });
        faces.push(Face {
            origin: lo + dz,
            u: dx,
            v: dy,
        });
        faces.push(Face {
            origin: lo,
            u: dx,
            v: dz,
        });
        faces.push(Face {
            origin: lo + dy,
            u: dx,
            v: dz,
        });
        faces.push(Face {
            origin: lo,
            u: dy,
            v: dz,
        });
        faces.push(Face {
            origin: lo + dx,
            u: dy,
            v: dz,
        });
    };
    add_box(Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.6, 0.35, 0.04));
    add_box(Vector3::new(0.0, 0.0, 0.04), Vector3::new(0.04, 0.35, 0.6));

    let areas: Vec<f64> = faces.iter().map(|f| f.u.norm() * f.v.norm()).collect();
    let total: f64 = areas.iter().sum();
    // Largest-remainder allocation of n points over faces.
    let mut counts: Vec<usize> = areas
        .iter()
        .map(|a| (a / total * n as f64).floor() as usize)
        .collect();
    let mut remainders: Vec<(f64, usize)> = areas
        .iter()
        .enumerate()
        .map(|(i, a)| (a / total * n as f64 - counts[i] as f64, i))
        .collect();
    remainders.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &(_, i) in remainders
        .iter()
        .cycle()
        .take(remainders.len().max(missing))
    {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }

    let mut pts = Vec::with_capacity(n);
    let mut index = 0usize;
    for (face, count) in faces.iter().zip(&counts) {
        for _ in 0..*count {
            let (a, b) = r2_sequence(index);
            index += 1;
            pts.push(Point3::from(face.origin + face.u * a + face.v * b));
        }
    }
    pts
}

fn center(mut pts: Vec<Point3>) -> Vec<Point3> {
    let mut mean = Vector3::zeros();
    for p in &pts {
        mean += p.coords;
    }
    mean /= pts.len() as f64;
    for p in &mut pts {
        p.coords -= mean;
    }
    pts
}

const DEFAULT_MODEL_POINTS: usize = 600;

/// Loads a model source string: a procedural primitive (optionally with a point
/// count, e.g. `"torus:800"`) or a `.ply` path. The cloud is centred on its
/// centroid so instance poses rotate about the model centre.
pub fn load_model(source: &str) -> Result<Vec<Point3>, HarnessError> {
    let fail = |msg: String| HarnessError::ModelLoadFailure(msg);
    let pts = if source.ends_with(".ply") {
        let cloud = ply::read_ply(Path::new(source)).map_err(|e| fail(format!("{source}: {e}")))?;
        cloud.points
    } else {
        let (name, count) = match source.split_once(':') {
            Some((name, count)) => (
                name,
                count
                    .parse::<usize>()
                    .map_err(|_| fail(format!("bad point count in {source:?}")))?,
            ),
            None => (source, DEFAULT_MODEL_POINTS),
        };
        if count < 10 {
            return Err(fail(format!("{source:?} asks for fewer than 10 points")));
        }
        match name {
            "torus" => torus(count),
            "helix" => helix(count),
            "bracket" => bracket(count),
            _ => return Err(fail(format!("unknown model source {source:?}"))),
        }
    };
    if pts.len() < 4 {
        return Err(fail(format!("model {source:?} has fewer than 4 points")));
    }
    Ok(center(pts))
}

// ---------------------------------------------------------------------------
// Scene assembly
// ---------------------------------------------------------------------------

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        if q.norm() > 1e-9 {
            return UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Builds a scene from `spec`: `K` rigid copies of the model with pairwise pose
/// distance (index-matched average model distance) at least half the model
/// diameter, a plane cut removing the `occlusion` fraction of each copy,
/// Gaussian noise on the survivors and uniform background clutter. Every choice
/// is drawn from one stream seeded by `spec.seed`, so equal specs produce
/// bit-identical outputs.
pub fn generate_scene(
    spec: &SceneSpec,
) -> Result<(PointCloud, PointCloud, GroundTruth), HarnessError> {
    let (lo, hi) = spec.instance_range;
    if lo < 1 || lo > hi {
        return Err(HarnessError::InvalidConfig(format!(
            "instance range [{lo}, {hi}] must satisfy 1 <= lo <= hi"
        )));
    }
    if !(0.0..1.0).contains(&spec.occlusion) {
        return Err(HarnessError::InvalidConfig(format!(
            "occlusion {} outside [0, 1)",
            spec.occlusion
        )));
    }
    if spec.noise_sigma < 0.0 {
        return Err(HarnessError::InvalidConfig(format!(
            "negative noise sigma {}",
            spec.noise_sigma
        )));
    }

    let model = load_model(&spec.model_source)?;
    let diameter = cloud_diameter(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = rng.random_range(lo..=hi);

    // Rejection-sample poses until every pair is separated; widen the workspace
    // whenever a placement stalls.
    let min_separation = 0.5 * diameter;
    let mut half_extent = diameter * (0.75 * (k as f64).cbrt() + 0.75);
    let mut poses: Vec<RigidTransform> = Vec::with_capacity(k);
    while poses.len() < k {
        let mut placed = false;
        for _ in 0..200 {
            let rotation = random_rotation(&mut rng);
            let translation = Vector3::new(
                rng.random_range(-half_extent..half_extent),
                rng.random_range(-half_extent..half_extent),
                rng.random_range(-half_extent..half_extent),
            );
            let pose = RigidTransform::new(rotation, translation)
                .expect("unit quaternion gives an orthonormal rotation");
            if poses
                .iter()
                .all(|p| add_distance(&pose, p, &model) >= min_separation)
            {
                poses.push(pose);
                placed = true;
                break;
            }
        }
        if !placed {
            half_extent *= 1.3;
        }
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut origins = Vec::new();
    let mut overlap = Vec::with_capacity(k);
    for (idx, pose) in poses.iter().enumerate() {
        let cut_dir = random_unit(&mut rng);
        let transformed: Vec<Point3> = model.iter().map(|p| pose.apply(p)).collect();
        let kept: Vec<usize> = if spec.occlusion > 0.0 {
            let retain = ((1.0 - spec.occlusion) * model.len() as f64)
                .round()
                .max(1.0) as usize;
            let mut order: Vec<usize> = (0..model.len()).collect();
            // Keep the `retain` points deepest on the positive side of the cut.
            order.sort_by(|&a, &b| {
                let da = cut_dir.dot(&(transformed[a].coords - pose.translation));
                let db = cut_dir.dot(&(transformed[b].coords - pose.translation));
                db.partial_cmp(&da).unwrap().then(a.cmp(&b))
            });
            let mut kept: Vec<usize> = order.into_iter().take(retain).collect();
            kept.sort_unstable();
            kept
        } else {
            (0..model.len()).collect()
        };
        overlap.push(kept.len() as f64 / model.len() as f64);
        for m in kept {
            let mut p = transformed[m];
            if spec.noise_sigma > 0.0 {
                p.x += spec.noise_sigma * standard_normal(&mut rng);
                p.y += spec.noise_sigma * standard_normal(&mut rng);
                p.z += spec.noise_sigma * standard_normal(&mut rng);
            }
            points.push(p);
            labels.push((idx + 1) as i32);
            origins.push(Some(m));
        }
    }

    let background = spec.background_points.unwrap_or(points.len() / 5);
    if background > 0 {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            for c in 0..3 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        for c in 0..3 {
            let pad = 0.1 * (hi[c] - lo[c]).max(0.1 * diameter);
            lo[c] -= pad;
            hi[c] += pad;
        }
        for _ in 0..background {
            points.push(Point3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            ));
            labels.push(0);
            origins.push(None);
        }
    }

    let gt = GroundTruth {
        poses,
        labels: labels.clone(),
        origins,
        overlap,
    };
    Ok((
        PointCloud::new(model),
        PointCloud::with_labels(points, labels),
        gt,
    ))
}
