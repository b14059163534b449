//! End-to-end orchestration: raw clouds in, scored pose hypotheses and
//! metrics out.
//!
//! The stages run in a fixed order — voxel pyramid and superpoint graphs,
//! pairwise encodings, the masked attention stack, superpoint seeding,
//! per-seed dense matching and pose fitting, and non-maximum suppression.
//! Everything is deterministic for fixed inputs except the reported wall
//! times.

use crate::attention::{run_transformer, InstanceMask, TransformerInputs, WeightSet};
use crate::embedding::{geodesic_sinusoid, geometric_structure_embedding, PairEmbedding};
use crate::geometry::{cloud_diameter, Correspondence};
use crate::matching::superpoint_match;
use crate::preprocess::{build_pyramid, build_superpoint_graph, PointCloud, SuperpointGraph};
use crate::selection::{dedupe_union, nms_select, PoseHypothesis};

use super::config::PipelineConfig;
use super::features::{gt_co_membership, gt_mask, superpoint_labels, OracleFeatures};
use super::metrics::{evaluate, inlier_ratio_metric, mask_miou, MetricsReport};
use super::scene::GroundTruth;
use super::HarnessError;

/// A cloud with its superpoint graph and the pairwise encodings the
/// attention stack consumes.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub graph: SuperpointGraph,
    /// Distance + angle encoding of each superpoint neighborhood.
    pub structure: PairEmbedding,
    /// Sinusoidal geodesic encoding of each superpoint neighborhood.
    pub geodesic: PairEmbedding,
}

/// Builds the superpoint graph (coarsest pyramid level over the raw points)
/// and both pairwise encodings.
pub fn prepare_cloud(
    cloud: &PointCloud,
    config: &PipelineConfig,
) -> Result<PreparedCloud, HarnessError> {
    let pyramid = build_pyramid(
        cloud,
        config.preprocessing.voxel_size,
        config.preprocessing.levels,
    )?;
    let superpoints = pyramid
        .last()
        .expect("pyramid has at least two levels")
        .points
        .clone();
    let graph = build_superpoint_graph(
        &cloud.points,
        superpoints,
        config.preprocessing.knn,
        config.preprocessing.edge_k,
    )?;
    let embedding = config.embedding();
    let structure = geometric_structure_embedding(&graph.superpoints, &graph.knn, &embedding)?;
    let geodesic = geodesic_sinusoid(&graph, &embedding)?;
    Ok(PreparedCloud {
        cloud: cloud.clone(),
        graph,
        structure,
        geodesic,
    })
}

/// Everything `run_pipeline` consumes.
pub struct PipelineInputs<'a> {
    pub model: &'a PointCloud,
    pub scene: &'a PointCloud,
    /// Per-point and per-superpoint descriptors for both clouds.
    pub features: &'a OracleFeatures,
    pub weights: &'a WeightSet,
    /// Ground truth; enables the metrics block and, optionally, the aligned
    /// mask.
    pub gt: Option<&'a GroundTruth>,
    /// Replace the learned mask update with the ground-truth co-membership
    /// mask (requires `gt`).
    pub gt_aligned_mask: bool,
}

/// The pipeline's full output.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationReport {
    /// Selected instances, ordered by descending global inlier count.
    pub hypotheses: Vec<PoseHypothesis>,
    /// Deduplicated union of every candidate's correspondences (the set each
    /// hypothesis' inlier count refers to).
    pub correspondences: Vec<Correspondence>,
    /// Final scene neighborhood mask out of the attention stack.
    pub predicted_mask: InstanceMask,
    /// Present when ground truth was supplied.
    pub metrics: Option<MetricsReport>,
    pub runtime_seconds: f64,
}

/// Prepares both clouds and runs the full pipeline.
pub fn run_pipeline(
    inputs: &PipelineInputs<'_>,
    config: &PipelineConfig,
) -> Result<RegistrationReport, HarnessError> {
    let start = std::time::Instant::now();
    config.validate()?;
    let model = prepare_cloud(inputs.model, config)?;
    let scene = prepare_cloud(inputs.scene, config)?;
    let mut report = run_prepared(
        &model,
        &scene,
        inputs.features,
        inputs.weights,
        inputs.gt,
        inputs.gt_aligned_mask,
        config,
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    report.runtime_seconds = elapsed;
    if let Some(m) = report.metrics.as_mut() {
        m.runtime_seconds = elapsed;
    }
    Ok(report)
}

fn expect_shape(ok: bool, msg: impl FnOnce() -> String) -> Result<(), HarnessError> {
    if ok {
        Ok(())
    } else {
        Err(HarnessError::ShapeMismatch(msg()))
    }
}

/// Runs the pipeline on already-prepared clouds. Callers that build the
/// graphs themselves (to derive features from them, or to amortize them over
/// a sweep) enter here; `run_pipeline` is the convenience wrapper.
#[allow(clippy::too_many_arguments)]
pub fn run_prepared(
    model: &PreparedCloud,
    scene: &PreparedCloud,
    features: &OracleFeatures,
    weights: &WeightSet,
    gt: Option<&GroundTruth>,
    gt_aligned_mask: bool,
    config: &PipelineConfig,
) -> Result<RegistrationReport, HarnessError> {
    let start = std::time::Instant::now();
    expect_shape(features.p_points.nrows() == model.cloud.len(), || {
        format!(
            "{} dense model feature rows for {} model points",
            features.p_points.nrows(),
            model.cloud.len()
        )
    })?;
    expect_shape(features.q_points.nrows() == scene.cloud.len(), || {
        format!(
            "{} dense scene feature rows for {} scene points",
            features.q_points.nrows(),
            scene.cloud.len()
        )
    })?;
    expect_shape(features.p_super.nrows() == model.graph.len(), || {
        format!(
            "{} model superpoint feature rows for {} superpoints",
            features.p_super.nrows(),
            model.graph.len()
        )
    })?;
    expect_shape(features.q_super.nrows() == scene.graph.len(), || {
        format!(
            "{} scene superpoint feature rows for {} superpoints",
            features.q_super.nrows(),
            scene.graph.len()
        )
    })?;

    let aligned_mask = if gt_aligned_mask {
        let gt = gt.ok_or_else(|| {
            HarnessError::InvalidConfig("ground-truth-aligned masks need ground truth".to_string())
        })?;
        expect_shape(gt.labels.len() == scene.cloud.len(), || {
            format!(
                "{} ground-truth labels for {} scene points",
                gt.labels.len(),
                scene.cloud.len()
            )
        })?;
        let labels = superpoint_labels(&gt.labels, &scene.graph);
        Some(gt_mask(&labels, &scene.graph.knn))
    } else {
        None
    };

    let transformed = run_transformer(
        &TransformerInputs {
            p_features: &features.p_super,
            q_features: &features.q_super,
            p_slots: &model.graph.knn,
            q_slots: &scene.graph.knn,
            p_structure: &model.structure,
            q_structure: &scene.structure,
            q_geodesic: &scene.geodesic,
            mask_tau: config.transformer.mask_tau,
            mask_override: aligned_mask.as_ref(),
        },
        weights,
    )?;

    let seeds = superpoint_match(
        &transformed.p_features,
        &transformed.q_features,
        config.matching.max_superpoint_matches,
    )?;
    let candidates = crate::matching::estimate_candidates(
        &seeds,
        &model.graph,
        &scene.graph,
        &transformed.mask,
        &model.cloud.points,
        &scene.cloud.points,
        &features.p_points,
        &features.q_points,
        &config.candidate(),
    )?;

    let corr_lists: Vec<&[Correspondence]> = candidates
        .iter()
        .map(|c| c.correspondences.as_slice())
        .collect();
    let correspondences = dedupe_union(&corr_lists);

    let diameter = cloud_diameter(&model.cloud.points);
    let selection = config.selection(diameter);
    let mut hypotheses = nms_select(
        &candidates,
        &model.cloud.points,
        &scene.cloud.points,
        &selection,
    );
    // A pose needs at least as much support as it takes to fit one.
    hypotheses.retain(|h| h.inlier_count >= config.matching.min_correspondences);

    let metrics = match gt {
        None => None,
        Some(gt) => {
            let poses: Vec<_> = hypotheses.iter().map(|h| h.pose).collect();
            let mut m = evaluate(
                &poses,
                &gt.poses,
                &model.cloud.points,
                &config.thresholds(),
                config.evaluation.symmetric,
            );
            m.inlier_ratio = if correspondences.is_empty() {
                0.0
            } else {
                inlier_ratio_metric(
                    &correspondences,
                    &model.cloud.points,
                    &scene.cloud.points,
                    &gt.poses,
                    config.evaluation.tau1,
                )?
            };
            let labels = superpoint_labels(&gt.labels, &scene.graph);
            let gt_rows = gt_co_membership(&labels, &scene.graph.knn);
            m.mask_miou = mask_miou(&transformed.mask, &gt_rows)?;
            m.runtime_seconds = start.elapsed().as_secs_f64();
            Some(m)
        }
    };

    Ok(RegistrationReport {
        hypotheses,
        correspondences,
        predicted_mask: transformed.mask,
        metrics,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
