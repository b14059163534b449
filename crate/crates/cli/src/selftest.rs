//! Built-in oracle checks: a fast battery of worked examples with known
//! answers, exercising each pipeline stage through the public API. Prints one
//! PASS/FAIL line per check; any failure makes the command exit non-zero.

use anyhow::{bail, Result};
use multireg::attention::{
    geometric_encoding_block, passthrough_weight_set, random_weight_set, FeatureMatrix,
    InstanceMask,
};
use multireg::embedding::{geometric_structure_embedding, EmbeddingConfig, PairEmbedding};
use multireg::geometry::{
    cloud_diameter, rre_rte, weighted_svd, Correspondence, Point3, RigidTransform,
};
use multireg::harness::{
    generate_scene, oracle_features, prepare_cloud, run_prepared, MetricsReport, PipelineConfig,
    SceneSpec,
};
use multireg::losses::{circle_loss, mask_loss, nll_matching_loss, CircleAnchor, LossConfig};
use multireg::matching::{
    mutual_correspondences, sinkhorn_match, CandidateEstimate, SuperpointCorrespondence,
};
use multireg::preprocess::knn_table;
use multireg::selection::{nms_select, SelectionConfig};
use nalgebra::{DMatrix, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type Check = (&'static str, fn() -> Result<String, String>);

const CHECKS: [Check; 8] = [
    ("harmonic-mean identity", check_f1),
    ("weighted SVD recovery", check_svd),
    ("transport marginals", check_transport),
    ("masked attention locality", check_masking),
    ("embedding rigid invariance", check_invariance),
    ("loss closed forms", check_losses),
    ("duplicate suppression", check_dedup),
    ("end-to-end clean scene", check_pipeline),
];

pub fn run() -> Result<()> {
    let mut failures = 0;
    for (name, check) in CHECKS {
        match check() {
            Ok(detail) => println!("PASS  {name:<28} {detail}"),
            Err(detail) => {
                println!("FAIL  {name:<28} {detail}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} of {} checks failed", CHECKS.len());
    }
    println!("selftest: all {} checks passed", CHECKS.len());
    Ok(())
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

fn random_pose(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0f64),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-6 {
        Vector3::x()
    } else {
        axis
    };
    RigidTransform::from_axis_angle(
        &axis,
        rng.random_range(0.0..std::f64::consts::PI),
        Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ),
    )
}

fn check_f1() -> Result<String, String> {
    let triples = [
        (38.51, 41.19, 39.80),
        (95.70, 91.21, 93.40),
        (94.63, 74.83, 83.57),
        (50.0, 50.0, 50.0),
    ];
    for (r, p, f) in triples {
        let got = MetricsReport::f1(r, p);
        if (got - f).abs() > 0.01 {
            return Err(format!("f1({r}, {p}) = {got:.4}, expected {f}"));
        }
    }
    Ok(format!("{} reference triples within ±0.01", triples.len()))
}

fn check_svd() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let pose = random_pose(&mut rng);
        let points = random_cloud(&mut rng, 10 + case % 40);
        let pairs: Vec<(Point3, Point3)> = points.iter().map(|p| (*p, pose.apply(p))).collect();
        let weights: Vec<f64> = points.iter().map(|_| rng.random_range(0.1..2.0)).collect();
        let est = weighted_svd(&pairs, &weights).map_err(|e| e.to_string())?;
        // Measure the rotation gap via ||Ra - Rb||_F = 2*sqrt(2)*sin(theta/2):
        // unlike acos of the trace, this resolves angles below 1e-8 rad.
        let fro = (est.rotation - pose.rotation).norm();
        let rre_rad = 2.0
            * (fro / (2.0 * std::f64::consts::SQRT_2))
                .clamp(-1.0, 1.0)
                .asin();
        let (_, rte) = rre_rte(&est, &pose);
        if rre_rad > 1e-8 || rte > 1e-8 {
            return Err(format!("case {case}: RRE {rre_rad:.2e} rad, RTE {rte:.2e}"));
        }
        // Zero-weight pairs must not move the answer at all.
        let mut padded = pairs.clone();
        padded.push((Point3::new(9.0, 9.0, 9.0), Point3::new(-9.0, 3.0, 0.0)));
        let mut padded_w = weights.clone();
        padded_w.push(0.0);
        let with_junk = weighted_svd(&padded, &padded_w).map_err(|e| e.to_string())?;
        if with_junk.rotation != est.rotation || with_junk.translation != est.translation {
            return Err(format!("case {case}: zero-weight pair changed the pose"));
        }
    }
    Ok("100 exact recoveries, zero-weight neutrality bitwise".to_string())
}

fn check_transport() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..20 {
        let m = rng.random_range(2..=24);
        let n = rng.random_range(2..=24);
        let scores = DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0));
        let eye = DMatrix::<f64>::identity(n, n) * (n as f64).sqrt();
        let plan = sinkhorn_match(&scores, &eye, 100, 1.0).map_err(|e| e.to_string())?;
        for i in 0..m {
            let sum: f64 = (0..=n).map(|j| plan[(i, j)]).sum();
            if (sum - 1.0).abs() >= 1e-4 {
                return Err(format!("case {case}: row {i} marginal {sum:.6}"));
            }
        }
        for j in 0..n {
            let sum: f64 = (0..=m).map(|i| plan[(i, j)]).sum();
            if (sum - 1.0).abs() >= 1e-4 {
                return Err(format!("case {case}: column {j} marginal {sum:.6}"));
            }
        }
        // Mutual matches must be symmetric: each returned pair is top-1 of
        // its row among real columns and top-1 of its column among real rows.
        for c in mutual_correspondences(&plan, 1) {
            let row_best = (0..n)
                .max_by(|&a, &b| plan[(c.p_index, a)].total_cmp(&plan[(c.p_index, b)]))
                .unwrap();
            let col_best = (0..m)
                .max_by(|&a, &b| plan[(a, c.q_index)].total_cmp(&plan[(b, c.q_index)]))
                .unwrap();
            if row_best != c.q_index || col_best != c.p_index {
                return Err(format!(
                    "case {case}: pair ({}, {}) is not mutual",
                    c.p_index, c.q_index
                ));
            }
        }
    }
    Ok("20 plans: marginals < 1e-4, mutual top-1 symmetric".to_string())
}

fn check_masking() -> Result<String, String> {
    for fixture in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(13 + fixture);
        let (n, k, d, d_t, heads) = (24, 6, 16, 12, 4);
        let points = random_cloud(&mut rng, n);
        let knn = knn_table(&points, k).map_err(|e| e.to_string())?;
        let cfg = EmbeddingConfig {
            dim: d_t,
            ..EmbeddingConfig::default()
        };
        let pair = geometric_structure_embedding(&points, &knn, &cfg).map_err(|e| e.to_string())?;
        let feats = FeatureMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let weights =
            random_weight_set(d, d, d_t, heads, 1, 100 + fixture).map_err(|e| e.to_string())?;
        let block = &weights.iterations[0].self_geo;

        let keep = 3usize;
        let mut allowed = vec![vec![false; k]; n];
        let mut kept = vec![Vec::new(); n];
        for i in 0..n {
            let mut slots: Vec<usize> = (0..k).collect();
            slots.shuffle(&mut rng);
            slots.truncate(keep);
            slots.sort_unstable();
            for &s in &slots {
                allowed[i][s] = true;
            }
            kept[i] = slots;
        }
        let mask = InstanceMask::from_allowed(allowed);
        let masked = geometric_encoding_block(&feats, &knn, &pair, Some(&mask), block, heads)
            .map_err(|e| e.to_string())?;

        let reduced_slots: Vec<Vec<usize>> = (0..n)
            .map(|i| kept[i].iter().map(|&s| knn[i][s]).collect())
            .collect();
        let reduced_values = DMatrix::from_fn(n * keep, d_t, |r, c| {
            pair.values[((r / keep) * k + kept[r / keep][r % keep], c)]
        });
        let reduced_pair = PairEmbedding {
            anchors: n,
            slots: keep,
            values: reduced_values,
        };
        let reduced =
            geometric_encoding_block(&feats, &reduced_slots, &reduced_pair, None, block, heads)
                .map_err(|e| e.to_string())?;
        let diff = (&masked - &reduced).abs().max();
        if diff >= 1e-9 {
            return Err(format!(
                "fixture {fixture}: masked vs reduced differ by {diff:.2e}"
            ));
        }
    }
    Ok("10 fixtures: masked equals physically reduced within 1e-9".to_string())
}

fn check_invariance() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let points = random_cloud(&mut rng, 40);
    let knn = knn_table(&points, 6).map_err(|e| e.to_string())?;
    let cfg = EmbeddingConfig {
        dim: 16,
        ..EmbeddingConfig::default()
    };
    let base = geometric_structure_embedding(&points, &knn, &cfg).map_err(|e| e.to_string())?;
    for t in 0..10 {
        let pose = random_pose(&mut rng);
        let moved: Vec<Point3> = points.iter().map(|p| pose.apply(p)).collect();
        let moved_knn = knn_table(&moved, 6).map_err(|e| e.to_string())?;
        let moved_pair =
            geometric_structure_embedding(&moved, &moved_knn, &cfg).map_err(|e| e.to_string())?;
        let diff = (&moved_pair.values - &base.values).abs().max();
        if diff >= 1e-6 {
            return Err(format!("transform {t}: embedding drifted by {diff:.2e}"));
        }
    }
    Ok("10 rigid motions leave the embedding fixed within 1e-6".to_string())
}

fn check_losses() -> Result<String, String> {
    let ln2 = std::f64::consts::LN_2;
    let cfg = LossConfig {
        delta_p: 0.125,
        delta_n: 1.5,
        gamma: 10.0,
    };
    let a = FeatureMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
    let b = FeatureMatrix::from_row_slice(2, 2, &[0.125, 0.0, 1.5, 0.0]);
    let anchor = CircleAnchor {
        anchor: 0,
        positives: vec![(0, 1.0)],
        negatives: vec![1],
    };
    let loss = circle_loss(&a, &b, &[anchor], &cfg).map_err(|e| e.to_string())?;
    if (loss - ln2).abs() >= 1e-9 {
        return Err(format!("circle loss at margins: {loss} vs ln 2"));
    }

    let mut plan = DMatrix::from_element(2, 2, 0.5);
    plan[(0, 0)] = (-1.0f64).exp();
    let loss = nll_matching_loss(&plan, &[(0, 0)], &[], &[]).map_err(|e| e.to_string())?;
    if (loss - 1.0).abs() >= 1e-9 {
        return Err(format!("matching NLL of e^-1: {loss} vs 1"));
    }

    let loss = mask_loss(&[0.5; 6], &[true, true, true, false, false, false])
        .map_err(|e| e.to_string())?;
    let expected = ln2 + (1.0 - 2.0 * 2.5 / 7.0);
    if (loss - expected).abs() >= 1e-9 {
        return Err(format!("mask loss uninformative: {loss} vs {expected}"));
    }
    Ok("circle, matching-NLL and mask fixtures within 1e-9".to_string())
}

fn check_dedup() -> Result<String, String> {
    for fixture in 0..2u64 {
        let spec = SceneSpec {
            model_source: "torus:200".to_string(),
            instance_range: (3, 5),
            noise_sigma: 0.0,
            occlusion: 0.0,
            background_points: Some(0),
            seed: 15 + fixture,
        };
        let (model, scene, gt) = generate_scene(&spec).map_err(|e| e.to_string())?;
        let mut candidates = Vec::new();
        for (inst, pose) in gt.poses.iter().enumerate() {
            let corrs: Vec<Correspondence> = gt
                .labels
                .iter()
                .enumerate()
                .filter(|&(_, &label)| label == inst as i32 + 1)
                .map(|(j, _)| Correspondence {
                    p_index: gt.origins[j].expect("instance point"),
                    q_index: j,
                    weight: 1.0,
                })
                .collect();
            for dup in 0..3 {
                candidates.push(CandidateEstimate {
                    seed: SuperpointCorrespondence {
                        p_index: inst,
                        q_index: 3 * inst + dup,
                        score: 1.0,
                    },
                    correspondences: corrs.clone(),
                    pose: *pose,
                });
            }
        }
        let cfg = SelectionConfig {
            model_diameter: cloud_diameter(&model.points),
            min_count_ratio: 0.3,
            ..SelectionConfig::default()
        };
        let hyps = nms_select(&candidates, &model.points, &scene.points, &cfg);
        if hyps.len() != gt.poses.len() {
            return Err(format!(
                "fixture {fixture}: {} hypotheses from {} instances",
                hyps.len(),
                gt.poses.len()
            ));
        }
    }
    Ok("3x duplicated candidates collapse to one pose per instance".to_string())
}

fn check_pipeline() -> Result<String, String> {
    let config = PipelineConfig::synthetic();
    let spec = SceneSpec {
        model_source: "torus:300".to_string(),
        instance_range: (1, 1),
        noise_sigma: 0.0,
        occlusion: 0.0,
        background_points: None,
        seed: 16,
    };
    let (model, scene, gt) = generate_scene(&spec).map_err(|e| e.to_string())?;
    let pm = prepare_cloud(&model, &config).map_err(|e| e.to_string())?;
    let ps = prepare_cloud(&scene, &config).map_err(|e| e.to_string())?;
    let features = oracle_features(
        &gt,
        &pm.graph,
        &ps.graph,
        model.points.len(),
        1.0,
        config.transformer.backbone_dim,
        17,
    )
    .map_err(|e| e.to_string())?;
    let weights = passthrough_weight_set(
        config.transformer.feature_dim,
        config.encoding.dim,
        config.transformer.heads,
        config.transformer.iterations,
    )
    .map_err(|e| e.to_string())?;
    let report = run_prepared(&pm, &ps, &features, &weights, Some(&gt), true, &config)
        .map_err(|e| e.to_string())?;
    let metrics = report.metrics.as_ref().ok_or("metrics missing")?;
    if report.hypotheses.len() != 1 || metrics.mean_recall != 1.0 || metrics.mean_precision != 1.0 {
        return Err(format!(
            "{} hypotheses, MR {:.3}, MP {:.3} on a clean single-instance scene",
            report.hypotheses.len(),
            metrics.mean_recall,
            metrics.mean_precision
        ));
    }
    let (rre_deg, rte) = rre_rte(&report.hypotheses[0].pose, &gt.poses[0]);
    if rre_deg.to_radians() > 1e-4 || rte > 1e-4 {
        return Err(format!("pose error RRE {rre_deg:.2e} deg, RTE {rte:.2e}"));
    }
    Ok("clean single-instance scene: MR = MP = 1, pose within 1e-4".to_string())
}
