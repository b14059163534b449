//! Acceptance suite: eight go/no-go checks over the registration library.
//!
//! Each check prints exactly one `PASS`/`FAIL` line with its wall-clock time
//! and a short result summary. Every check carries a time budget; blowing the
//! budget fails the check even when all assertions hold. The process exits
//! with status 1 when any check fails, so `cargo test` reports it.
//!
//! Run with `cargo test -p multireg --test acceptance` (the target opts out
//! of the default harness so the report is a plain, ordered list).

use std::time::{Duration, Instant};

use multireg::attention::{
    geometric_encoding_block, passthrough_weight_set, random_weight_set, FeatureMatrix,
    InstanceMask,
};
use multireg::embedding::{geometric_structure_embedding, EmbeddingConfig, PairEmbedding};
use multireg::geometry::{
    cloud_diameter, rre_rte, weighted_svd, Correspondence, Point3, RigidTransform,
};
use multireg::harness::{
    bench_scene, generate_scene, run_bench, strip_runtime_column, BenchSweep, MetricsReport,
    PipelineConfig, SceneSpec,
};
use multireg::losses::{circle_loss, mask_loss, nll_matching_loss, CircleAnchor, LossConfig};
use multireg::matching::{
    mutual_correspondences, sinkhorn_match, CandidateEstimate, SuperpointCorrespondence,
};
use multireg::preprocess::knn_table;
use multireg::selection::{nms_select, pose_similarity, SelectionConfig};
use nalgebra::{DMatrix, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type CheckResult = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(
        &mut self,
        index: usize,
        name: &str,
        budget: Duration,
        check: impl FnOnce() -> CheckResult,
    ) -> Duration {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let (pass, mut detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !in_time {
            detail.push_str(&format!(" [over {:.0}s budget]", budget.as_secs_f64()));
        }
        let status = if pass { "PASS" } else { "FAIL" };
        println!(
            "{status}  {index}. {name:<58} {:>8.2}s  {detail}",
            elapsed.as_secs_f64()
        );
        if !pass {
            self.failures += 1;
        }
        elapsed
    }
}

fn main() {
    let mut suite = Suite { failures: 0 };

    suite.run(
        1,
        "recall/precision/F1 identity on reference metric triples",
        Duration::from_secs(1),
        check_metric_triples,
    );
    suite.run(
        2,
        "weighted SVD pose recovery and zero-weight neutrality",
        Duration::from_secs(5),
        check_weighted_svd,
    );
    suite.run(
        3,
        "optimal-transport marginals and mutual top-k symmetry",
        Duration::from_secs(10),
        check_transport,
    );
    suite.run(
        4,
        "masked attention locality and embedding rigid invariance",
        Duration::from_secs(10),
        check_attention_and_embedding,
    );
    let c5 = suite.run(
        5,
        "synthetic multi-instance benchmark vs sequential RANSAC",
        Duration::from_secs(300),
        check_benchmark_quality,
    );
    suite.run(
        6,
        "duplicate-candidate suppression to one pose per instance",
        Duration::from_secs(10),
        check_duplicate_suppression,
    );
    suite.run(
        7,
        "loss functions against closed-form values",
        Duration::from_secs(1),
        check_losses,
    );
    suite.run(
        8,
        "benchmark CSV determinism across repeated runs",
        2 * c5.max(Duration::from_secs(1)),
        check_benchmark_determinism,
    );

    if suite.failures > 0 {
        println!("acceptance: {} of 8 checks failed", suite.failures);
        std::process::exit(1);
    }
    println!("acceptance: all 8 checks passed");
}

// ---------------------------------------------------------------------------
// 1. Recall/precision/F1 arithmetic on reference triples.
// ---------------------------------------------------------------------------

/// `(recall, precision, f1)` triples in percent, drawn from published
/// multi-instance registration results across two datasets and many methods,
/// so the harmonic-mean identity is exercised over a wide dynamic range.
const METRIC_TRIPLES: [(f64, f64, f64); 28] = [
    (54.75, 22.76, 32.15),
    (73.50, 45.01, 55.83),
    (86.99, 70.05, 77.60),
    (92.60, 73.79, 82.13),
    (28.17, 5.09, 8.62),
    (38.29, 13.69, 20.16),
    (36.15, 24.70, 29.34),
    (57.26, 17.24, 26.50),
    (72.68, 44.80, 55.43),
    (78.84, 67.16, 72.53),
    (82.81, 81.90, 82.35),
    (94.63, 74.83, 83.57),
    (77.12, 46.04, 57.65),
    (84.78, 71.34, 77.48),
    (91.85, 91.08, 91.46),
    (96.52, 89.03, 92.62),
    (95.70, 91.21, 93.40),
    (1.34, 0.72, 0.93),
    (1.25, 1.39, 1.31),
    (1.17, 2.11, 1.50),
    (3.21, 8.50, 4.66),
    (7.71, 4.57, 5.73),
    (8.99, 13.58, 10.81),
    (13.98, 26.64, 18.33),
    (12.04, 10.47, 11.20),
    (14.14, 26.29, 18.38),
    (18.68, 40.11, 25.48),
    (38.51, 41.19, 39.80),
];

fn check_metric_triples() -> CheckResult {
    let mut worst = 0.0f64;
    for &(recall, precision, f1) in &METRIC_TRIPLES {
        let computed = MetricsReport::f1(recall, precision);
        let err = (computed - f1).abs();
        worst = worst.max(err);
        if err > 0.01 {
            return Err(format!(
                "f1({recall}, {precision}) = {computed:.4}, expected {f1} (err {err:.4} > 0.01)"
            ));
        }
    }
    Ok(format!(
        "{} triples reproduced within ±0.01 (worst {:.4})",
        METRIC_TRIPLES.len(),
        worst
    ))
}

// ---------------------------------------------------------------------------
// 2. Weighted SVD pose recovery.
// ---------------------------------------------------------------------------

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
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let translation = Vector3::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    );
    RigidTransform::from_axis_angle(&axis, angle, translation)
}

/// Rotation angle between two rotations, in radians.
///
/// `||Ra - Rb||_F = 2*sqrt(2)*|sin(theta/2)|`, so this resolves angles down
/// to roundoff. The acos-of-trace form cannot: near zero its argument sits
/// within one ulp of 1, flooring the measurable angle at ~1.5e-8 rad.
fn rotation_angle_rad(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let fro = (a.rotation - b.rotation).norm();
    2.0 * (fro / (2.0 * std::f64::consts::SQRT_2))
        .clamp(-1.0, 1.0)
        .asin()
}

fn check_weighted_svd() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0002);
    let mut worst_rot = 0.0f64;
    let mut worst_trans = 0.0f64;
    let mut neutrality_checks = 0usize;
    for case in 0..1000 {
        let n = 10 + case % 91; // 10..=100 points
        let pose = random_pose(&mut rng);
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
        let estimate = weighted_svd(&pairs, &weights)
            .map_err(|e| format!("case {case}: weighted SVD failed: {e}"))?;
        let rre_rad = rotation_angle_rad(&estimate, &pose);
        let (_, rte) = rre_rte(&estimate, &pose);
        worst_rot = worst_rot.max(rre_rad);
        worst_trans = worst_trans.max(rte);
        if rre_rad >= 1e-8 || rte >= 1e-8 {
            return Err(format!(
                "case {case}: rotation error {rre_rad:.3e} rad, translation error {rte:.3e}"
            ));
        }

        // Zero-weight pairs must leave the answer bit-for-bit untouched.
        if case % 50 == 0 {
            let mut padded_pairs = pairs.clone();
            let mut padded_weights = weights.clone();
            for _ in 0..5 {
                let junk_p = Point3::new(
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                );
                let junk_q = Point3::new(
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                    rng.random_range(-9.0..9.0),
                );
                padded_pairs.push((junk_p, junk_q));
                padded_weights.push(0.0);
            }
            let padded = weighted_svd(&padded_pairs, &padded_weights)
                .map_err(|e| format!("case {case}: padded SVD failed: {e}"))?;
            if padded.rotation != estimate.rotation || padded.translation != estimate.translation {
                return Err(format!(
                    "case {case}: zero-weight pairs changed the result (not bitwise neutral)"
                ));
            }
            neutrality_checks += 1;
        }
    }
    Ok(format!(
        "1000 poses recovered (worst rot {worst_rot:.2e} rad, trans {worst_trans:.2e}); \
         {neutrality_checks} bitwise zero-weight checks"
    ))
}

// ---------------------------------------------------------------------------
// 3. Optimal-transport marginals and mutual matching.
// ---------------------------------------------------------------------------

/// Feeds an arbitrary `m x n` score matrix through the matching entry point:
/// with `feat_p = S` and `feat_q = sqrt(n) * I_n` the internal `1/sqrt(d)`
/// scaling cancels and the transport runs on exactly `S`.
fn transport_of_scores(scores: &DMatrix<f64>, iterations: usize, slack: f64) -> DMatrix<f64> {
    let n = scores.ncols();
    let eye = DMatrix::<f64>::identity(n, n) * (n as f64).sqrt();
    sinkhorn_match(scores, &eye, iterations, slack).expect("transport on injected scores")
}

/// Rank-counting membership test, independent of the sort used internally:
/// `(i, j)` is a mutual top-k pair when fewer than `k` entries beat
/// `plan[(i, j)]` in its row and in its column, with ties broken by index.
fn is_mutual_by_counting(plan: &DMatrix<f64>, i: usize, j: usize, k: usize) -> bool {
    let m = plan.nrows() - 1;
    let n = plan.ncols() - 1;
    let v = plan[(i, j)];
    let row_rank = (0..n)
        .filter(|&jj| {
            let u = plan[(i, jj)];
            u > v || (u == v && jj < j)
        })
        .count();
    let col_rank = (0..m)
        .filter(|&ii| {
            let u = plan[(ii, j)];
            u > v || (u == v && ii < i)
        })
        .count();
    row_rank < k && col_rank < k
}

fn check_transport() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0003);
    let slacks = [0.0, 0.5, 1.0, 1.7];
    let mut worst_marginal = 0.0f64;
    let mut pair_total = 0usize;
    for case in 0..200 {
        let m = rng.random_range(2..=64);
        let n = rng.random_range(2..=64);
        let scores = DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0));
        let slack = slacks[case % slacks.len()];
        let plan = transport_of_scores(&scores, 100, slack);
        if plan.nrows() != m + 1 || plan.ncols() != n + 1 {
            return Err(format!(
                "case {case}: plan is {}x{}, expected {}x{}",
                plan.nrows(),
                plan.ncols(),
                m + 1,
                n + 1
            ));
        }

        // Marginals: every real row/column sums to 1; the slack row absorbs
        // n units of mass and the slack column m.
        for i in 0..=m {
            let target = if i == m { n as f64 } else { 1.0 };
            let sum: f64 = (0..=n).map(|j| plan[(i, j)]).sum();
            let err = (sum - target).abs();
            worst_marginal = worst_marginal.max(err);
            if err >= 1e-4 {
                return Err(format!(
                    "case {case} ({m}x{n}, slack {slack}): row {i} marginal {sum:.6} vs {target} \
                     (err {err:.2e})"
                ));
            }
        }
        for j in 0..=n {
            let target = if j == n { m as f64 } else { 1.0 };
            let sum: f64 = (0..=m).map(|i| plan[(i, j)]).sum();
            let err = (sum - target).abs();
            worst_marginal = worst_marginal.max(err);
            if err >= 1e-4 {
                return Err(format!(
                    "case {case} ({m}x{n}, slack {slack}): column {j} marginal {sum:.6} vs \
                     {target} (err {err:.2e})"
                ));
            }
        }

        // Mutual top-k symmetry, verified by independent rank counting: the
        // returned set must contain exactly the mutual pairs, no more and no
        // fewer.
        let k = 1 + case % 4;
        let returned = mutual_correspondences(&plan, k);
        let returned_set: std::collections::BTreeSet<(usize, usize)> =
            returned.iter().map(|c| (c.p_index, c.q_index)).collect();
        if returned_set.len() != returned.len() {
            return Err(format!(
                "case {case}: duplicate pairs in mutual top-{k} output"
            ));
        }
        for i in 0..m {
            for j in 0..n {
                let mutual = is_mutual_by_counting(&plan, i, j, k);
                if mutual != returned_set.contains(&(i, j)) {
                    return Err(format!(
                        "case {case}: pair ({i}, {j}) mutual-by-counting {mutual} but returned \
                         {}",
                        !mutual
                    ));
                }
            }
        }
        for c in &returned {
            if c.weight != plan[(c.p_index, c.q_index)] {
                return Err(format!(
                    "case {case}: pair ({}, {}) weight {} differs from plan entry",
                    c.p_index, c.q_index, c.weight
                ));
            }
        }
        pair_total += returned.len();
    }
    Ok(format!(
        "200 plans converged (worst marginal err {worst_marginal:.2e}); {pair_total} mutual pairs \
         cross-checked by rank counting"
    ))
}

// ---------------------------------------------------------------------------
// 4. Masked attention locality and embedding rigid invariance.
// ---------------------------------------------------------------------------

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

/// Masked attention over the full neighbourhood must equal unmasked attention
/// over the physically reduced neighbourhood (masked slots removed from the
/// slot table and the pair embedding).
fn check_masked_equals_reduced() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for fixture in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0004 + fixture as u64);
        let n = 20 + fixture % 12;
        let k = 6;
        let d = if fixture % 2 == 0 { 16 } else { 32 };
        let heads = if fixture % 3 == 0 { 2 } else { 4 };
        let d_t = 12;
        let points = random_cloud(&mut rng, n);
        let knn = knn_table(&points, k).map_err(|e| format!("fixture {fixture}: {e}"))?;
        let cfg = EmbeddingConfig {
            dim: d_t,
            ..EmbeddingConfig::default()
        };
        let pair = geometric_structure_embedding(&points, &knn, &cfg)
            .map_err(|e| format!("fixture {fixture}: {e}"))?;
        let feats = FeatureMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let weights = random_weight_set(d, d, d_t, heads, 1, 0xbeef + fixture as u64)
            .map_err(|e| format!("fixture {fixture}: {e}"))?;
        let block = &weights.iterations[0].self_geo;

        // Keep a uniform number of slots per anchor so the reduced slot
        // table stays rectangular; which slots survive varies per anchor.
        let keep_count = 2 + fixture % 4; // 2..=5 of 6
        let mut allowed = vec![vec![false; k]; n];
        let mut kept_slots = vec![Vec::with_capacity(keep_count); n];
        for i in 0..n {
            let mut slots: Vec<usize> = (0..k).collect();
            slots.shuffle(&mut rng);
            slots.truncate(keep_count);
            slots.sort_unstable();
            for &s in &slots {
                allowed[i][s] = true;
            }
            kept_slots[i] = slots;
        }
        let mask = InstanceMask::from_allowed(allowed);

        let masked = geometric_encoding_block(&feats, &knn, &pair, Some(&mask), block, heads)
            .map_err(|e| format!("fixture {fixture}: masked pass: {e}"))?;

        let reduced_slots: Vec<Vec<usize>> = (0..n)
            .map(|i| kept_slots[i].iter().map(|&s| knn[i][s]).collect())
            .collect();
        let reduced_values = DMatrix::from_fn(n * keep_count, d_t, |r, c| {
            let anchor = r / keep_count;
            let slot = kept_slots[anchor][r % keep_count];
            pair.values[(anchor * k + slot, c)]
        });
        let reduced_pair = PairEmbedding {
            anchors: n,
            slots: keep_count,
            values: reduced_values,
        };
        let reduced =
            geometric_encoding_block(&feats, &reduced_slots, &reduced_pair, None, block, heads)
                .map_err(|e| format!("fixture {fixture}: reduced pass: {e}"))?;

        let diff = (&masked - &reduced).abs().max();
        worst = worst.max(diff);
        if diff >= 1e-9 {
            return Err(format!(
                "fixture {fixture}: masked vs reduced attention differ by {diff:.2e}"
            ));
        }
    }
    Ok(worst)
}

/// The pair embedding depends only on distances and angles, so it must be
/// invariant (to within roundoff) under a rigid motion of the whole cloud.
fn check_embedding_invariance() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0040);
    let points = random_cloud(&mut rng, 40);
    let k = 6;
    let knn = knn_table(&points, k).map_err(|e| e.to_string())?;
    let cfg = EmbeddingConfig {
        dim: 16,
        ..EmbeddingConfig::default()
    };
    let base = geometric_structure_embedding(&points, &knn, &cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for t in 0..100 {
        let pose = random_pose(&mut rng);
        let moved: Vec<Point3> = points.iter().map(|p| pose.apply(p)).collect();
        let moved_knn = knn_table(&moved, k).map_err(|e| e.to_string())?;
        if moved_knn != knn {
            return Err(format!(
                "transform {t}: neighbour table changed under rigid motion"
            ));
        }
        let moved_pair =
            geometric_structure_embedding(&moved, &moved_knn, &cfg).map_err(|e| e.to_string())?;
        let diff = (&moved_pair.values - &base.values).abs().max();
        worst = worst.max(diff);
        if diff >= 1e-6 {
            return Err(format!(
                "transform {t}: embedding moved by {diff:.2e} under rigid motion"
            ));
        }
    }
    Ok(worst)
}

fn check_attention_and_embedding() -> CheckResult {
    let mask_worst = check_masked_equals_reduced()?;
    let inv_worst = check_embedding_invariance()?;
    Ok(format!(
        "100 mask fixtures within 1e-9 (worst {mask_worst:.2e}); 100 rigid motions within 1e-6 \
         (worst {inv_worst:.2e})"
    ))
}

// ---------------------------------------------------------------------------
// 5. Synthetic multi-instance benchmark vs the sequential-RANSAC baseline.
// ---------------------------------------------------------------------------

fn check_benchmark_quality() -> CheckResult {
    let config = PipelineConfig::synthetic();
    let weights = passthrough_weight_set(
        config.transformer.feature_dim,
        config.encoding.dim,
        config.transformer.heads,
        config.transformer.iterations,
    )
    .map_err(|e| e.to_string())?;

    // Noise at 0.5% of the model diameter.
    let probe = SceneSpec {
        model_source: "torus:300".to_string(),
        instance_range: (1, 1),
        noise_sigma: 0.0,
        occlusion: 0.0,
        background_points: Some(0),
        seed: 0,
    };
    let (model, _, _) = generate_scene(&probe).map_err(|e| e.to_string())?;
    let sigma = 0.005 * cloud_diameter(&model.points);

    let scenes = 100usize;
    let mut recall_sum = 0.0;
    let mut precision_sum = 0.0;
    let mut base_recall_sum = 0.0;
    let mut base_precision_sum = 0.0;
    for s in 0..scenes {
        let spec = SceneSpec {
            model_source: "torus:300".to_string(),
            instance_range: (4, 16),
            noise_sigma: sigma,
            occlusion: 0.3,
            background_points: None,
            seed: 5000 + s as u64,
        };
        let (_, scene, _) = generate_scene(&spec).map_err(|e| e.to_string())?;
        if scene.points.len() > 20_000 {
            return Err(format!(
                "scene {s} has {} points (> 20k)",
                scene.points.len()
            ));
        }
        let outcome = bench_scene(&config, &spec, 0.5, spec.seed ^ 0xfea7, true, &weights)
            .map_err(|e| format!("scene {s}: {e}"))?;
        recall_sum += outcome.pipeline.mean_recall;
        precision_sum += outcome.pipeline.mean_precision;
        base_recall_sum += outcome.baseline.mean_recall;
        base_precision_sum += outcome.baseline.mean_precision;
    }
    let mr = recall_sum / scenes as f64;
    let mp = precision_sum / scenes as f64;
    let mf = MetricsReport::f1(mr, mp);
    let base_mr = base_recall_sum / scenes as f64;
    let base_mp = base_precision_sum / scenes as f64;
    let base_mf = MetricsReport::f1(base_mr, base_mp);
    if mr < 0.90 {
        return Err(format!("mean recall {mr:.4} < 0.90 (precision {mp:.4})"));
    }
    if mp < 0.90 {
        return Err(format!("mean precision {mp:.4} < 0.90 (recall {mr:.4})"));
    }
    if mf <= base_mf {
        return Err(format!(
            "pipeline F1 {mf:.4} does not beat baseline F1 {base_mf:.4}"
        ));
    }
    Ok(format!(
        "100 scenes: MR {mr:.4} MP {mp:.4} MF {mf:.4}; baseline MF {base_mf:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 6. Duplicate-candidate suppression.
// ---------------------------------------------------------------------------

fn check_duplicate_suppression() -> CheckResult {
    let mut total_instances = 0usize;
    for fixture in 0..10u64 {
        let spec = SceneSpec {
            model_source: "torus:250".to_string(),
            instance_range: (4, 9),
            noise_sigma: 0.0,
            occlusion: 0.0,
            background_points: Some(0),
            seed: 6000 + fixture,
        };
        let (model, scene, gt) = generate_scene(&spec).map_err(|e| e.to_string())?;
        let k_instances = gt.poses.len();
        let diameter = cloud_diameter(&model.points);

        // Three identical candidates per placed instance, with exact
        // ground-truth support and pose.
        let mut candidates = Vec::new();
        for (inst, pose) in gt.poses.iter().enumerate() {
            let corrs: Vec<Correspondence> = gt
                .labels
                .iter()
                .enumerate()
                .filter(|&(_, &label)| label == inst as i32 + 1)
                .map(|(j, _)| Correspondence {
                    p_index: gt.origins[j].expect("instance points carry origins"),
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
        let mut rng = ChaCha8Rng::seed_from_u64(0x5f1e + fixture);
        candidates.shuffle(&mut rng);

        let cfg = SelectionConfig {
            inlier_radius: 0.05,
            merge_similarity: 0.8,
            min_count_ratio: 0.3,
            refine_iterations: 5,
            model_diameter: diameter,
            similarity_samples: 256,
        };
        let hypotheses = nms_select(&candidates, &model.points, &scene.points, &cfg);
        if hypotheses.len() != k_instances {
            return Err(format!(
                "fixture {fixture}: {} hypotheses from {k_instances} instances x3 duplicates",
                hypotheses.len()
            ));
        }

        // Each ground-truth pose is recovered exactly once, to within 1e-6.
        let mut claimed = vec![false; k_instances];
        for h in &hypotheses {
            let mut matched = None;
            for (inst, pose) in gt.poses.iter().enumerate() {
                let (rre_deg, rte) = rre_rte(&h.pose, pose);
                if rre_deg.to_radians() < 1e-6 && rte < 1e-6 {
                    matched = Some(inst);
                    break;
                }
            }
            match matched {
                Some(inst) if !claimed[inst] => claimed[inst] = true,
                Some(inst) => {
                    return Err(format!("fixture {fixture}: instance {inst} claimed twice"))
                }
                None => {
                    return Err(format!(
                        "fixture {fixture}: a hypothesis matches no ground-truth pose within 1e-6"
                    ))
                }
            }
        }

        // Survivors are pairwise dissimilar under the merge threshold.
        for a in 0..hypotheses.len() {
            for b in a + 1..hypotheses.len() {
                let sim = pose_similarity(
                    &hypotheses[a].pose,
                    &hypotheses[b].pose,
                    &model.points,
                    diameter,
                );
                if sim >= cfg.merge_similarity {
                    return Err(format!(
                        "fixture {fixture}: hypotheses {a} and {b} similarity {sim:.4} >= {}",
                        cfg.merge_similarity
                    ));
                }
            }
        }
        total_instances += k_instances;
    }
    Ok(format!(
        "10 fixtures, {total_instances} instances: 3x duplicates collapse to one exact pose each"
    ))
}

// ---------------------------------------------------------------------------
// 7. Loss functions against closed-form values.
// ---------------------------------------------------------------------------

fn check_losses() -> CheckResult {
    let tol = 1e-9;
    let ln2 = std::f64::consts::LN_2;

    // Circle loss. Margins hit exactly: both factors are 1, loss = ln 2.
    let cfg = LossConfig {
        delta_p: 0.125,
        delta_n: 1.5,
        gamma: 10.0,
    };
    let feats_a = FeatureMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
    let feats_b = FeatureMatrix::from_row_slice(3, 2, &[0.125, 0.0, 1.5, 0.0, 0.25, 0.0]);
    let at_margins = CircleAnchor {
        anchor: 0,
        positives: vec![(0, 1.0)],
        negatives: vec![1],
    };
    let loss =
        circle_loss(&feats_a, &feats_b, &[at_margins.clone()], &cfg).map_err(|e| e.to_string())?;
    if (loss - ln2).abs() >= tol {
        return Err(format!(
            "circle loss at margins: {loss} vs ln 2 (err {:.2e})",
            (loss - ln2).abs()
        ));
    }

    // General case: positive at distance 0.25 with overlap 0.25, negative at
    // distance 1.5+0.5; every margin and sqrt is exactly representable.
    let off_margins = CircleAnchor {
        anchor: 0,
        positives: vec![(2, 0.25)],
        negatives: vec![1],
    };
    let feats_b2 = FeatureMatrix::from_row_slice(3, 2, &[0.125, 0.0, 2.0, 0.0, 0.25, 0.0]);
    let s_pos = (0.25f64.sqrt() * 10.0 * 0.125 * 0.125).exp();
    let s_neg = (10.0 * (-0.5f64) * (-0.5)).exp();
    let expected = (1.0 + s_pos * s_neg).ln();
    let loss = circle_loss(&feats_a, &feats_b2, &[off_margins.clone()], &cfg)
        .map_err(|e| e.to_string())?;
    if (loss - expected).abs() >= tol {
        return Err(format!(
            "circle loss off margins: {loss} vs {expected} (err {:.2e})",
            (loss - expected).abs()
        ));
    }

    // Zero overlap nullifies the positive exponent regardless of distance.
    let zero_overlap = CircleAnchor {
        anchor: 0,
        positives: vec![(2, 0.0)],
        negatives: vec![1],
    };
    let expected_zero = (1.0 + (10.0 * 0.25f64).exp()).ln();
    let loss =
        circle_loss(&feats_a, &feats_b2, &[zero_overlap], &cfg).map_err(|e| e.to_string())?;
    if (loss - expected_zero).abs() >= tol {
        return Err(format!(
            "circle loss zero-overlap: {loss} vs {expected_zero} (err {:.2e})",
            (loss - expected_zero).abs()
        ));
    }

    // Mean over two anchors. Against `feats_b2` the first anchor's positive
    // still sits exactly at delta_p (factor one) but its negative moved to
    // distance 2, so that anchor contributes ln(1 + s_neg).
    let loss = circle_loss(&feats_a, &feats_b2, &[at_margins, off_margins], &cfg)
        .map_err(|e| e.to_string())?;
    let expected_mean = ((1.0 + 1.0 * s_neg).ln() + expected) / 2.0;
    if (loss - expected_mean).abs() >= tol {
        return Err(format!(
            "circle loss two-anchor mean: {loss} vs {expected_mean} (err {:.2e})",
            (loss - expected_mean).abs()
        ));
    }

    // Matching NLL. Certain assignment: zero loss.
    let mut plan = DMatrix::from_element(3, 4, 0.3);
    plan[(0, 0)] = 1.0;
    plan[(1, 2)] = 1.0;
    let loss = nll_matching_loss(&plan, &[(0, 0), (1, 2)], &[], &[]).map_err(|e| e.to_string())?;
    if loss.abs() >= tol {
        return Err(format!("matching NLL of certain assignment: {loss} vs 0"));
    }

    // A single pair at e^-1 costs exactly 1.
    let mut plan = DMatrix::from_element(2, 2, 0.5);
    plan[(0, 0)] = (-1.0f64).exp();
    let loss = nll_matching_loss(&plan, &[(0, 0)], &[], &[]).map_err(|e| e.to_string())?;
    if (loss - 1.0).abs() >= tol {
        return Err(format!("matching NLL of e^-1 entry: {loss} vs 1"));
    }

    // Two pairs at 1/2, one unmatched row at 1/4, one unmatched column at
    // 1/2: total 5 ln 2.
    let mut plan = DMatrix::from_element(4, 4, 0.1);
    plan[(0, 0)] = 0.5;
    plan[(1, 1)] = 0.5;
    plan[(2, 3)] = 0.25;
    plan[(3, 2)] = 0.5;
    let loss =
        nll_matching_loss(&plan, &[(0, 0), (1, 1)], &[2], &[2]).map_err(|e| e.to_string())?;
    if (loss - 5.0 * ln2).abs() >= tol {
        return Err(format!(
            "matching NLL mixed fixture: {loss} vs {}",
            5.0 * ln2
        ));
    }

    // Mask loss. Perfect all-ones prediction: BCE 0, dice 1 - 12/11.
    let loss = mask_loss(&[1.0; 5], &[true; 5]).map_err(|e| e.to_string())?;
    let expected = 1.0 - 2.0 * 6.0 / 11.0;
    if (loss - expected).abs() >= tol {
        return Err(format!("mask loss all-ones: {loss} vs {expected}"));
    }

    // Perfect all-zeros prediction: BCE 0, dice -1 from the smoothing.
    let loss = mask_loss(&[0.0; 4], &[false; 4]).map_err(|e| e.to_string())?;
    if (loss + 1.0).abs() >= tol {
        return Err(format!("mask loss all-zeros: {loss} vs -1"));
    }

    // Uninformative prediction at 1/2 on a half-true target.
    let loss = mask_loss(&[0.5; 6], &[true, true, true, false, false, false])
        .map_err(|e| e.to_string())?;
    let expected = ln2 + (1.0 - 2.0 * 2.5 / 7.0);
    if (loss - expected).abs() >= tol {
        return Err(format!("mask loss uninformative: {loss} vs {expected}"));
    }

    Ok("10 closed-form fixtures within 1e-9 (circle, matching NLL, mask)".to_string())
}

// ---------------------------------------------------------------------------
// 8. Benchmark CSV determinism.
// ---------------------------------------------------------------------------

fn check_benchmark_determinism() -> CheckResult {
    let config = PipelineConfig::synthetic();
    let sweep = BenchSweep {
        model_source: "torus:250".to_string(),
        instance_range: (3, 6),
        noise: vec![0.0, 0.004],
        occlusion: vec![0.0, 0.3],
        inlier_rate: vec![1.0, 0.5],
        scenes: 2,
        seed: 99,
        background_points: None,
        gt_aligned_mask: true,
    };
    let weights = passthrough_weight_set(
        config.transformer.feature_dim,
        config.encoding.dim,
        config.transformer.heads,
        config.transformer.iterations,
    )
    .map_err(|e| e.to_string())?;
    let first = run_bench(&config, &sweep, &weights).map_err(|e| e.to_string())?;
    let second = run_bench(&config, &sweep, &weights).map_err(|e| e.to_string())?;
    let a = strip_runtime_column(&first);
    let b = strip_runtime_column(&second);
    if a != b {
        let mismatch = a
            .lines()
            .zip(b.lines())
            .position(|(x, y)| x != y)
            .map(|i| format!("first differing line {}", i + 1))
            .unwrap_or_else(|| "line counts differ".to_string());
        return Err(format!("repeated sweep is not byte-identical ({mismatch})"));
    }
    let lines = first.lines().count();
    Ok(format!(
        "two identical {lines}-line sweeps (8 cells x 2 scenes), runtime column excluded"
    ))
}
