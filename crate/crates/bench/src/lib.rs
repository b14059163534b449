//! Shared fixture builders for the criterion benchmarks: deterministic
//! mid-sized inputs for each pipeline stage.

use multireg::attention::{passthrough_weight_set, random_weight_set, WeightSet};
use multireg::embedding::{geometric_structure_embedding, EmbeddingConfig, PairEmbedding};
use multireg::geometry::{Point3, RigidTransform};
use multireg::harness::{
    generate_scene, oracle_features, prepare_cloud, OracleFeatures, PipelineConfig, PreparedCloud,
    SceneSpec,
};
use multireg::preprocess::knn_table;
use nalgebra::{DMatrix, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Matched point pairs under a fixed rigid motion, with positive weights.
pub fn svd_fixture(n: usize) -> (Vec<(Point3, Point3)>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pose = RigidTransform::from_axis_angle(
        &Vector3::new(0.3, -0.5, 0.8),
        1.1,
        Vector3::new(0.4, -0.2, 0.9),
    );
    let mut pairs = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for _ in 0..n {
        let p = Point3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        pairs.push((p, pose.apply(&p)));
        weights.push(rng.random_range(0.1..2.0));
    }
    (pairs, weights)
}

/// Two feature matrices whose transport plan is representative of the point
/// matching stage (`rows x dim` and `cols x dim`).
pub fn matching_fixture(rows: usize, cols: usize, dim: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = DMatrix::from_fn(rows, dim, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(cols, dim, |_, _| rng.random_range(-1.0..1.0));
    (a, b)
}

/// Inputs for one masked geometric-attention block over a random cloud.
pub struct EncodingFixture {
    pub feats: DMatrix<f64>,
    pub slots: Vec<Vec<usize>>,
    pub pair: PairEmbedding,
    pub weights: WeightSet,
    pub heads: usize,
}

pub fn encoding_fixture(anchors: usize, k: usize, dim: usize) -> EncodingFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<Point3> = (0..anchors)
        .map(|_| {
            Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let slots = knn_table(&points, k).expect("kNN table");
    let cfg = EmbeddingConfig {
        dim: 16,
        ..EmbeddingConfig::default()
    };
    let pair = geometric_structure_embedding(&points, &slots, &cfg).expect("pair embedding");
    let feats = DMatrix::from_fn(anchors, dim, |_, _| rng.random_range(-1.0..1.0));
    let weights = random_weight_set(dim, dim, 16, 4, 1, 4).expect("weights");
    EncodingFixture {
        feats,
        slots,
        pair,
        weights,
        heads: 4,
    }
}

/// A prepared single-scene registration problem for end-to-end timing.
pub struct PipelineFixture {
    pub config: PipelineConfig,
    pub model: PreparedCloud,
    pub scene: PreparedCloud,
    pub features: OracleFeatures,
    pub weights: WeightSet,
    pub gt: multireg::harness::GroundTruth,
}

pub fn pipeline_fixture() -> PipelineFixture {
    let config = PipelineConfig::synthetic();
    let spec = SceneSpec {
        model_source: "torus:300".to_string(),
        instance_range: (4, 4),
        noise_sigma: 0.002,
        occlusion: 0.2,
        background_points: None,
        seed: 5,
    };
    let (model, scene, gt) = generate_scene(&spec).expect("scene");
    let prepared_model = prepare_cloud(&model, &config).expect("model preparation");
    let prepared_scene = prepare_cloud(&scene, &config).expect("scene preparation");
    let features = oracle_features(
        &gt,
        &prepared_model.graph,
        &prepared_scene.graph,
        model.points.len(),
        0.8,
        config.transformer.backbone_dim,
        6,
    )
    .expect("oracle features");
    let weights = passthrough_weight_set(
        config.transformer.feature_dim,
        config.encoding.dim,
        config.transformer.heads,
        config.transformer.iterations,
    )
    .expect("weights");
    PipelineFixture {
        config,
        model: prepared_model,
        scene: prepared_scene,
        features,
        weights,
        gt,
    }
}
