//! Sinusoidal encodings of pairwise geometry: distances, reference angles and geodesic
//! distances, expressed per (anchor, kNN-slot) pair.
//!
//! All encoders share one primitive, [`sinusoidal_embed`], which maps a scalar to an
//! even-dimensional sin/cos vector with geometrically decaying frequencies (base
//! 10000).  The pair-level encoders are invariant under rigid motion of the input
//! points because they only consume distances and angles.

use crate::geometry::Point3;
use crate::preprocess::SuperpointGraph;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbeddingError {
    #[error("embedding dimension must be even and >= 2, got {0}")]
    OddDimension(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Scales and sizes for the pairwise encoders.
///
/// `sigma_d` and `sigma_g` are distance scales in model units; `sigma_a` is the angle
/// scale in degrees; `dim` must be even; `angle_refs` is how many reference neighbours
/// feed the max-pooled angular part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub sigma_d: f64,
    pub sigma_a: f64,
    pub sigma_g: f64,
    pub angle_refs: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            sigma_d: 0.2,
            sigma_a: 15.0,
            sigma_g: 0.1,
            angle_refs: 3,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(EmbeddingError::OddDimension(self.dim));
        }
        Ok(())
    }
}

/// Dense per-(anchor, slot) vectors: row `anchor * slots + slot` of `values`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairEmbedding {
    pub anchors: usize,
    pub slots: usize,
    pub values: DMatrix<f64>,
}

impl PairEmbedding {
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// The vector for `(anchor, slot)`.
    pub fn row(
        &self,
        anchor: usize,
        slot: usize,
    ) -> nalgebra::MatrixView1xX<'_, f64, nalgebra::U1, nalgebra::Dyn> {
        self.values.row(anchor * self.slots + slot)
    }
}

/// Sin/cos positional encoding of a scalar: entry `2k` is
/// `sin((value / sigma) / 10000^(2k / dim))`, entry `2k + 1` the matching cosine.
///
/// Panics unless `dim` is even and >= 2 (validated configs never violate this).
pub fn sinusoidal_embed(value: f64, sigma: f64, dim: usize) -> Vec<f64> {
    assert!(
        dim >= 2 && dim % 2 == 0,
        "sinusoidal dim must be even and >= 2"
    );
    let scaled = value / sigma;
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let arg = scaled / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Angle in degrees between two difference vectors; zero-length vectors contribute 0.
fn angle_degrees(u: &nalgebra::Vector3<f64>, v: &nalgebra::Vector3<f64>) -> f64 {
    if u.norm_squared() == 0.0 || v.norm_squared() == 0.0 {
        return 0.0;
    }
    u.cross(v).norm().atan2(u.dot(v)).to_degrees()
}

/// Distance-plus-angle structure encoding for every (anchor, slot) pair.
///
/// The distance part embeds `||p_i - p_j||` at scale `sigma_d`.  The angular part
/// takes the anchor's `angle_refs` nearest other neighbours `x` (excluding the slot
/// and the anchor itself), embeds each angle `(p_j - p_i, p_x - p_i)` at scale
/// `sigma_a`, max-pools them elementwise, and is summed onto the distance part.  With
/// no references available the angular part is zero.  Entries therefore lie in
/// `[-2, 2]`; each constituent sinusoid lies in `[-1, 1]`.
pub fn geometric_structure_embedding(
    points: &[Point3],
    knn: &[Vec<usize>],
    cfg: &EmbeddingConfig,
) -> Result<PairEmbedding, EmbeddingError> {
    cfg.validate()?;
    if knn.len() != points.len() {
        return Err(EmbeddingError::ShapeMismatch(format!(
            "{} kNN rows for {} points",
            knn.len(),
            points.len()
        )));
    }
    let slots = knn.first().map_or(0, Vec::len);
    let mut values = DMatrix::zeros(points.len() * slots, cfg.dim);
    for (i, slot_list) in knn.iter().enumerate() {
        if slot_list.len() != slots {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "ragged kNN table at anchor {i}"
            )));
        }
        let anchor = points[i];
        for (slot, &j) in slot_list.iter().enumerate() {
            let diff = points[j] - anchor;
            let mut entry = sinusoidal_embed(diff.norm(), cfg.sigma_d, cfg.dim);
            // Reference neighbours: nearest non-self slots other than `j` (slot lists
            // are distance-sorted, so taking them in order is taking the nearest).
            let mut pooled: Option<Vec<f64>> = None;
            for &x in slot_list
                .iter()
                .skip(1)
                .filter(|&&x| x != j)
                .take(cfg.angle_refs)
            {
                let refdiff = points[x] - anchor;
                let ang = angle_degrees(&diff, &refdiff);
                let emb = sinusoidal_embed(ang / cfg.sigma_a, 1.0, cfg.dim);
                pooled = Some(match pooled {
                    None => emb,
                    Some(mut acc) => {
                        for (a, e) in acc.iter_mut().zip(&emb) {
                            *a = a.max(*e);
                        }
                        acc
                    }
                });
            }
            if let Some(acc) = pooled {
                for (e, a) in entry.iter_mut().zip(&acc) {
                    *e += a;
                }
            }
            let row = i * slots + slot;
            for (c, v) in entry.into_iter().enumerate() {
                values[(row, c)] = v;
            }
        }
    }
    Ok(PairEmbedding {
        anchors: points.len(),
        slots,
        values,
    })
}

/// Raw sinusoidal encoding of the graph's per-slot geodesic distances (scale
/// `sigma_g`), without any projection.
pub fn geodesic_sinusoid(
    graph: &SuperpointGraph,
    cfg: &EmbeddingConfig,
) -> Result<PairEmbedding, EmbeddingError> {
    cfg.validate()?;
    let slots = graph.slots();
    let mut values = DMatrix::zeros(graph.len() * slots, cfg.dim);
    for (i, dists) in graph.geodesic.iter().enumerate() {
        if dists.len() != slots {
            return Err(EmbeddingError::ShapeMismatch(format!(
                "ragged geodesic table at anchor {i}"
            )));
        }
        for (slot, &g) in dists.iter().enumerate() {
            let emb = sinusoidal_embed(g, cfg.sigma_g, cfg.dim);
            let row = i * slots + slot;
            for (c, v) in emb.into_iter().enumerate() {
                values[(row, c)] = v;
            }
        }
    }
    Ok(PairEmbedding {
        anchors: graph.len(),
        slots,
        values,
    })
}

/// Projected geodesic embedding: the sinusoid of each per-slot geodesic distance
/// multiplied by `projection` (`dim x out_dim`).
pub fn geodesic_embedding(
    graph: &SuperpointGraph,
    cfg: &EmbeddingConfig,
    projection: &DMatrix<f64>,
) -> Result<PairEmbedding, EmbeddingError> {
    let raw = geodesic_sinusoid(graph, cfg)?;
    if projection.nrows() != cfg.dim {
        return Err(EmbeddingError::ShapeMismatch(format!(
            "projection rows {} != embedding dim {}",
            projection.nrows(),
            cfg.dim
        )));
    }
    Ok(PairEmbedding {
        anchors: raw.anchors,
        slots: raw.slots,
        values: &raw.values * projection,
    })
}
