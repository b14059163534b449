//! Transformer weight files: a JSON manifest describing the architecture and the
//! tensor listing, plus a sibling `.bin` blob of float32 little-endian values in
//! listing order.

use super::HarnessError;
use crate::attention::{TensorSpec, WeightSet};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsManifest {
    backbone_dim: usize,
    feature_dim: usize,
    encoding_dim: usize,
    heads: usize,
    iterations: usize,
    tensors: Vec<TensorSpec>,
}

/// Location of the value blob belonging to a manifest path (extension swapped
/// for `bin`).
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `set` as a manifest at `path` and the values at [`blob_path`].
///
/// Values are rounded through f32; a set whose parameters already fit f32 (such
/// as [`crate::attention::random_weight_set`] output) round-trips exactly.
pub fn save_weights(path: &Path, set: &WeightSet) -> Result<(), HarnessError> {
    let manifest = WeightsManifest {
        backbone_dim: set.backbone_dim,
        feature_dim: set.d,
        encoding_dim: set.d_t,
        heads: set.heads,
        iterations: set.iterations.len(),
        tensors: set.tensor_specs(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(path, json)?;
    let data = set.flatten();
    let mut blob = Vec::with_capacity(data.len() * 4);
    for v in &data {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(blob_path(path), blob)?;
    Ok(())
}

/// Loads a weight set saved by [`save_weights`], validating the tensor listing
/// against the declared architecture and the blob length against the listing.
pub fn load_weights(path: &Path) -> Result<WeightSet, HarnessError> {
    let manifest: WeightsManifest = serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| HarnessError::Format(format!("weights manifest: {e}")))?;
    let mut set = WeightSet::zeroed(
        manifest.backbone_dim,
        manifest.feature_dim,
        manifest.encoding_dim,
        manifest.heads,
        manifest.iterations,
    )?;
    let specs = set.tensor_specs();
    if specs != manifest.tensors {
        return Err(HarnessError::Format(
            "manifest tensor listing does not match the declared architecture".into(),
        ));
    }
    let total: usize = specs.iter().map(|t| t.rows * t.cols).sum();
    let blob = std::fs::read(blob_path(path))?;
    if blob.len() != total * 4 {
        return Err(HarnessError::Format(format!(
            "weight blob holds {} bytes, listing needs {}",
            blob.len(),
            total * 4
        )));
    }
    let data: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    set.fill_from_slice(&data)?;
    Ok(set)
}
