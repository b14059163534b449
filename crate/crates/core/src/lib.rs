//! Multi-instance rigid registration of a model point cloud against a cluttered scene.
//!
//! The library is organised as a pipeline over two point clouds: a `model` (one rigid
//! object) and a `scene` containing an unknown number of transformed copies of the model
//! plus background clutter.  The stages are:
//!
//! 1. [`preprocess`]: voxel-grid pyramid, superpoint graph (patches, kNN, geodesic table);
//! 2. [`embedding`]: sinusoidal encodings of pairwise distances, angles, geodesics;
//! 3. [`attention`]: an instance-aware transformer forward pass producing matchable
//!    superpoint features and per-superpoint neighbour masks;
//! 4. [`matching`]: superpoint matching, candidate expansion, optimal-transport point
//!    matching, per-candidate pose estimation;
//! 5. [`selection`]: inlier-ratio-sorted non-maximum suppression yielding one pose per
//!    detected instance;
//! 6. [`losses`]: evaluable training-loss functions (forward values only);
//! 7. [`harness`]: synthetic scene generation, oracle features, baselines, metrics,
//!    configuration, weight files and the end-to-end pipeline.
//!
//! All numerics are `f64` and every stage is deterministic for fixed inputs and seeds.

pub mod attention;
pub mod embedding;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod preprocess;
pub mod selection;

pub use attention::{FeatureMatrix, InstanceMask, WeightSet};
pub use geometry::{Correspondence, Point3, RigidTransform};
pub use preprocess::{PointCloud, SuperpointGraph};
