//! Benchmark harness: synthetic scenes, oracle features, a sequential-RANSAC
//! baseline, evaluation metrics, configuration and weight/cloud I/O, and the
//! end-to-end registration pipeline used by the CLI and the test suites.

pub mod baseline;
pub mod benchrun;
pub mod config;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod ply;
pub mod records;
pub mod scene;
pub mod weights_io;

pub use baseline::sequential_ransac;
pub use benchrun::{bench_scene, run_bench, strip_runtime_column, BenchSweep, SceneOutcome};
pub use config::PipelineConfig;
pub use features::{mutual_top1_matches, oracle_features, OracleFeatures};
pub use metrics::{evaluate, inlier_ratio_metric, mask_miou, EvalThresholds, MetricsReport};
pub use pipeline::{
    prepare_cloud, run_pipeline, run_prepared, PipelineInputs, PreparedCloud, RegistrationReport,
};
pub use records::{poses_from_json, poses_to_json, PoseRecord};
pub use scene::{generate_scene, GroundTruth, SceneSpec};

use crate::attention::AttentionError;
use crate::embedding::EmbeddingError;
use crate::geometry::GeometryError;
use crate::matching::MatchingError;
use crate::preprocess::PreprocessError;
use thiserror::Error;

/// Errors raised by harness operations (generation, metrics, I/O, pipeline).
#[derive(Debug, Error)]
pub enum HarnessError {
    /// The requested model source could not be loaded or parsed.
    #[error("failed to load model: {0}")]
    ModelLoadFailure(String),
    /// A metric over correspondences was asked to score an empty set.
    #[error("no correspondences to score")]
    EmptyCorrespondences,
    /// Two containers that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A configuration document is structurally or numerically invalid.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    /// A data file (PLY, weights, poses) is malformed.
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
