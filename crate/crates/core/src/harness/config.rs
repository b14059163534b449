//! Pipeline configuration: one JSON document controls every stage.
//!
//! A config names a `preset` ("synthetic", "scan2cad", or "robi") and may
//! override any field; unknown keys anywhere are rejected. Presets differ in
//! physical scale (voxel sizes, residual radii) and network size.

use crate::embedding::EmbeddingConfig;
use crate::harness::HarnessError;
use crate::matching::CandidateConfig;
use crate::selection::SelectionConfig;
use serde::{Deserialize, Serialize};

use super::metrics::EvalThresholds;

/// Voxel pyramid and superpoint graph construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessingConfig {
    /// Finest voxel edge length; doubles at every pyramid level.
    pub voxel_size: f64,
    /// Pyramid depth; the coarsest level supplies the superpoints.
    pub levels: usize,
    /// Superpoint neighborhood size (slot 0 is the anchor itself).
    pub knn: usize,
    /// Edge degree of the geodesic graph.
    pub edge_k: usize,
}

/// Pairwise encoder scales. `sigma_a_deg` is in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingConfig {
    pub dim: usize,
    pub sigma_d: f64,
    pub sigma_a_deg: f64,
    pub sigma_g: f64,
    pub angle_refs: usize,
}

/// Attention stack shape and the mask decision threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    /// Width of the raw superpoint descriptors entering the stack.
    pub backbone_dim: usize,
    /// Working feature width inside the stack.
    pub feature_dim: usize,
    pub heads: usize,
    pub iterations: usize,
    /// Confidence threshold of the mask update.
    pub mask_tau: f64,
}

/// Candidate generation: seeding, expansion, and transport matching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    pub max_superpoint_matches: usize,
    pub point_cap: usize,
    pub sinkhorn_iterations: usize,
    pub dustbin_slack: f64,
    pub mutual_top_k: usize,
    pub min_correspondences: usize,
}

/// Pose clustering and suppression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSettings {
    /// Strict inlier radius for ranking hypotheses.
    pub inlier_radius: f64,
    /// Pose similarity above which two candidates merge.
    pub merge_similarity: f64,
    /// Keep hypotheses with at least this fraction of the best inlier count.
    pub min_count_ratio: f64,
    pub refine_iterations: usize,
    pub similarity_samples: usize,
}

/// Metric thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Residual radius of the correspondence inlier-ratio metric.
    pub tau1: f64,
    pub rre_limit_deg: f64,
    pub rte_limit: f64,
    pub add_s_factor: f64,
    /// Evaluate with the symmetric-object criterion.
    pub symmetric: bool,
}

/// Every tunable of the registration pipeline, grouped by stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocessing: PreprocessingConfig,
    pub encoding: EncodingConfig,
    pub transformer: TransformerConfig,
    pub matching: MatchingConfig,
    pub selection: SelectionSettings,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    /// The named preset, or an error listing the valid names.
    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        match name {
            "synthetic" => Ok(Self::synthetic()),
            "scan2cad" => Ok(Self::scan2cad()),
            "robi" => Ok(Self::robi()),
            other => Err(HarnessError::InvalidConfig(format!(
                "unknown preset '{other}' (expected synthetic, scan2cad, or robi)"
            ))),
        }
    }

    /// Tuned for the unit-scale synthetic benchmark primitives.
    pub fn synthetic() -> Self {
        Self {
            preprocessing: PreprocessingConfig {
                voxel_size: 0.05,
                levels: 3,
                knn: 16,
                edge_k: 8,
            },
            encoding: EncodingConfig {
                dim: 16,
                sigma_d: 0.2,
                sigma_a_deg: 15.0,
                sigma_g: 0.1,
                angle_refs: 3,
            },
            transformer: TransformerConfig {
                backbone_dim: 32,
                feature_dim: 32,
                heads: 4,
                iterations: 2,
                mask_tau: 0.6,
            },
            matching: MatchingConfig {
                max_superpoint_matches: 128,
                point_cap: 128,
                sinkhorn_iterations: 30,
                dustbin_slack: 1.0,
                // Top-1 keeps the oracle-feature benchmark's correspondence
                // mixture at its calibrated inlier rate; the permissive
                // real-data default is 3.
                mutual_top_k: 1,
                // Junk poses fit on mismatched pairs pick up a handful of
                // chance inliers; genuine instances collect hundreds. The
                // floor separates the two at this scene scale.
                min_correspondences: 20,
            },
            selection: SelectionSettings {
                inlier_radius: 0.05,
                merge_similarity: 0.8,
                min_count_ratio: 0.3,
                refine_iterations: 5,
                similarity_samples: 256,
            },
            evaluation: EvaluationConfig {
                tau1: 0.05,
                rre_limit_deg: 15.0,
                rte_limit: 0.1,
                add_s_factor: 0.1,
                symmetric: false,
            },
        }
    }

    /// Indoor-furniture scale (meters; ~2 cm sampling).
    pub fn scan2cad() -> Self {
        Self {
            preprocessing: PreprocessingConfig {
                voxel_size: 0.025,
                levels: 3,
                knn: 16,
                edge_k: 8,
            },
            encoding: EncodingConfig {
                dim: 32,
                sigma_d: 0.2,
                sigma_a_deg: 15.0,
                sigma_g: 0.1,
                angle_refs: 3,
            },
            transformer: TransformerConfig {
                backbone_dim: 64,
                feature_dim: 64,
                heads: 4,
                iterations: 3,
                mask_tau: 0.6,
            },
            matching: MatchingConfig {
                max_superpoint_matches: 128,
                point_cap: 256,
                sinkhorn_iterations: 100,
                dustbin_slack: 1.0,
                mutual_top_k: 3,
                min_correspondences: 3,
            },
            selection: SelectionSettings {
                inlier_radius: 0.05,
                merge_similarity: 0.8,
                min_count_ratio: 0.8,
                refine_iterations: 5,
                similarity_samples: 256,
            },
            evaluation: EvaluationConfig {
                tau1: 0.05,
                rre_limit_deg: 15.0,
                rte_limit: 0.1,
                add_s_factor: 0.1,
                symmetric: false,
            },
        }
    }

    /// Industrial bin-picking scale (meters; millimeter-sized parts).
    pub fn robi() -> Self {
        Self {
            preprocessing: PreprocessingConfig {
                voxel_size: 0.0015,
                levels: 3,
                knn: 32,
                edge_k: 8,
            },
            encoding: EncodingConfig {
                dim: 32,
                sigma_d: 0.02,
                sigma_a_deg: 15.0,
                sigma_g: 0.01,
                angle_refs: 3,
            },
            transformer: TransformerConfig {
                backbone_dim: 64,
                feature_dim: 64,
                heads: 4,
                iterations: 3,
                mask_tau: 0.6,
            },
            matching: MatchingConfig {
                max_superpoint_matches: 128,
                point_cap: 256,
                sinkhorn_iterations: 100,
                dustbin_slack: 1.0,
                mutual_top_k: 3,
                min_correspondences: 3,
            },
            selection: SelectionSettings {
                inlier_radius: 0.003,
                merge_similarity: 0.7,
                min_count_ratio: 0.2,
                refine_iterations: 5,
                similarity_samples: 256,
            },
            evaluation: EvaluationConfig {
                tau1: 0.005,
                rre_limit_deg: 15.0,
                rte_limit: 0.006,
                add_s_factor: 0.1,
                symmetric: false,
            },
        }
    }

    /// Parses a JSON document: `{"preset": "...", ...overrides...}`. Overrides
    /// deep-merge onto the preset; any key that is not a config field is an
    /// error. A missing `preset` means "synthetic".
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let mut user: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| HarnessError::InvalidConfig(format!("config is not valid JSON: {e}")))?;
        let serde_json::Value::Object(ref mut map) = user else {
            return Err(HarnessError::InvalidConfig(
                "config must be a JSON object".to_string(),
            ));
        };
        let preset_name = match map.remove("preset") {
            None => "synthetic".to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(other) => {
                return Err(HarnessError::InvalidConfig(format!(
                    "preset must be a string, got {other}"
                )))
            }
        };
        let preset = Self::preset(&preset_name)?;
        let mut base =
            serde_json::to_value(preset).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        deep_merge(&mut base, user);
        serde_json::from_value(base)
            .map_err(|e| HarnessError::InvalidConfig(format!("bad config value: {e}")))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Encoder settings; the angle scale stays in degrees, which is what the
    /// encoder expects.
    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.encoding.dim,
            sigma_d: self.encoding.sigma_d,
            sigma_a: self.encoding.sigma_a_deg,
            sigma_g: self.encoding.sigma_g,
            angle_refs: self.encoding.angle_refs,
        }
    }

    pub fn candidate(&self) -> CandidateConfig {
        CandidateConfig {
            max_superpoint_matches: self.matching.max_superpoint_matches,
            point_cap: self.matching.point_cap,
            sinkhorn_iterations: self.matching.sinkhorn_iterations,
            dustbin_slack: self.matching.dustbin_slack,
            mutual_top_k: self.matching.mutual_top_k,
            min_correspondences: self.matching.min_correspondences,
        }
    }

    /// Selection settings with the runtime-known model diameter injected.
    pub fn selection(&self, model_diameter: f64) -> SelectionConfig {
        SelectionConfig {
            inlier_radius: self.selection.inlier_radius,
            merge_similarity: self.selection.merge_similarity,
            min_count_ratio: self.selection.min_count_ratio,
            refine_iterations: self.selection.refine_iterations,
            model_diameter,
            similarity_samples: self.selection.similarity_samples,
        }
    }

    pub fn thresholds(&self) -> EvalThresholds {
        EvalThresholds {
            rre_limit_deg: self.evaluation.rre_limit_deg,
            rte_limit: self.evaluation.rte_limit,
            add_s_factor: self.evaluation.add_s_factor,
        }
    }

    /// Quick sanity checks on values serde cannot express.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: &str| Err(HarnessError::InvalidConfig(msg.to_string()));
        if self.preprocessing.voxel_size <= 0.0 {
            return bad("preprocessing.voxel_size must be positive");
        }
        if self.preprocessing.levels < 2 {
            return bad("preprocessing.levels must be at least 2");
        }
        if self.preprocessing.knn < 2 {
            return bad("preprocessing.knn must be at least 2");
        }
        if self.encoding.dim < 2 || self.encoding.dim % 2 != 0 {
            return bad("encoding.dim must be even and at least 2");
        }
        if self.transformer.feature_dim % self.transformer.heads != 0 {
            return bad("transformer.feature_dim must be divisible by heads");
        }
        if !(0.0..=1.0).contains(&self.transformer.mask_tau) {
            return bad("transformer.mask_tau must lie in [0, 1]");
        }
        if self.matching.min_correspondences < 3 {
            return bad("matching.min_correspondences must be at least 3");
        }
        if self.selection.inlier_radius <= 0.0 || self.evaluation.tau1 <= 0.0 {
            return bad("inlier radii must be positive");
        }
        Ok(())
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

/// Recursively overlays `patch` onto `base`: objects merge key-by-key, any
/// other value replaces the base value.
fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(patch_map)) => {
            for (key, value) in patch_map {
                match base_map.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base_map.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load_and_validate() {
        for name in ["synthetic", "scan2cad", "robi"] {
            let cfg = PipelineConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        assert!(matches!(
            PipelineConfig::preset("kitti"),
            Err(HarnessError::InvalidConfig(_))
        ));
    }

    #[test]
    fn empty_object_is_the_synthetic_preset() {
        let cfg = PipelineConfig::from_json("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::synthetic());
    }

    #[test]
    fn nested_overrides_replace_single_fields() {
        let cfg = PipelineConfig::from_json(
            r#"{
                "preset": "scan2cad",
                "preprocessing": {"voxel_size": 0.04},
                "matching": {"sinkhorn_iterations": 17}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.preprocessing.voxel_size, 0.04);
        assert_eq!(cfg.matching.sinkhorn_iterations, 17);
        // Untouched siblings keep their preset values.
        assert_eq!(
            cfg.preprocessing.knn,
            PipelineConfig::scan2cad().preprocessing.knn
        );
        assert_eq!(cfg.selection, PipelineConfig::scan2cad().selection);
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        let top = PipelineConfig::from_json(r#"{"voxel": 0.1}"#);
        assert!(
            matches!(top, Err(HarnessError::InvalidConfig(_))),
            "{top:?}"
        );
        let nested = PipelineConfig::from_json(r#"{"matching": {"topk": 5}}"#);
        assert!(
            matches!(nested, Err(HarnessError::InvalidConfig(_))),
            "{nested:?}"
        );
        let typo = PipelineConfig::from_json(r#"{"evaluation": {"tau_one": 0.1}}"#);
        assert!(
            matches!(typo, Err(HarnessError::InvalidConfig(_))),
            "{typo:?}"
        );
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(PipelineConfig::from_json(r#"{"preset": 3}"#).is_err());
        assert!(PipelineConfig::from_json(r#"[1, 2]"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"matching": {"point_cap": "lots"}}"#).is_err());
    }

    #[test]
    fn json_round_trip_preserves_the_config() {
        let cfg = PipelineConfig::robi();
        let text = cfg.to_json_pretty();
        let back = PipelineConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn converters_carry_fields_over() {
        let cfg = PipelineConfig::synthetic();
        let emb = cfg.embedding();
        assert_eq!(emb.dim, cfg.encoding.dim);
        assert_eq!(emb.sigma_a, cfg.encoding.sigma_a_deg);
        let sel = cfg.selection(2.5);
        assert_eq!(sel.model_diameter, 2.5);
        assert_eq!(sel.inlier_radius, cfg.selection.inlier_radius);
        let cand = cfg.candidate();
        assert_eq!(cand.point_cap, cfg.matching.point_cap);
        assert_eq!(cfg.thresholds().rte_limit, cfg.evaluation.rte_limit);
    }

    #[test]
    fn validate_catches_bad_values() {
        let mut cfg = PipelineConfig::synthetic();
        cfg.transformer.heads = 5; // 32 % 5 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::synthetic();
        cfg.preprocessing.voxel_size = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::synthetic();
        cfg.matching.min_correspondences = 2;
        assert!(cfg.validate().is_err());
    }
}
