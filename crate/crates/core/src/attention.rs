//! Attention-based feature refinement over superpoint graphs.
//!
//! Model and scene superpoint features are projected into a shared width and
//! refined by a fixed number of iterations, each of which runs:
//!
//! 1. self-attention over each model superpoint's neighborhood, biased by the
//!    pairwise structure embedding (distances + reference angles);
//! 2. the same self-attention over scene superpoints, additionally restricted
//!    by an instance mask so a superpoint only attends to neighbors believed
//!    to lie on the same object instance;
//! 3. cross-attention from model to scene and back, sharing one set of
//!    projection weights for both directions;
//! 4. an update of the instance mask from the refined scene features and the
//!    geodesic pair embedding.
//!
//! Masking is additive: disallowed slots receive [`MASKED_SCORE`] before the
//! softmax, which underflows their weight to exactly zero, so a masked slot
//! contributes nothing to the output. The whole pass is deterministic.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::PairEmbedding;

/// Additive score for attention slots that the instance mask disallows.
/// Large enough that `exp(score - max)` underflows to exactly `0.0`.
pub const MASKED_SCORE: f64 = -1.0e9;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1.0e-5;

/// Row-per-item feature matrix (`n` items by `dim` channels).
pub type FeatureMatrix = DMatrix<f64>;

/// Errors from attention-stage validation.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttentionError {
    /// A feature matrix has no rows.
    #[error("empty feature matrix")]
    EmptyFeatures,
    /// Tensor or input dimensions are inconsistent.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<(), AttentionError> {
    if cond {
        Ok(())
    } else {
        Err(AttentionError::ShapeMismatch(msg()))
    }
}

// ---------------------------------------------------------------------------
// Weight containers
// ---------------------------------------------------------------------------

/// Dense affine map applied as `x * weight + bias` on row-per-item matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    /// `input_dim x output_dim` matrix.
    pub weight: DMatrix<f64>,
    /// Length `output_dim`.
    pub bias: DVector<f64>,
}

impl LinearWeights {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self, AttentionError> {
        require(weight.ncols() == bias.len(), || {
            format!(
                "linear bias length {} does not match weight columns {}",
                bias.len(),
                weight.ncols()
            )
        })?;
        Ok(Self { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    /// Applies the map to every row of `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * &self.weight;
        let bias_row = self.bias.transpose();
        for mut row in out.row_iter_mut() {
            row += &bias_row;
        }
        out
    }

    fn check(&self, input: usize, output: usize, name: &str) -> Result<(), AttentionError> {
        require(
            self.input_dim() == input && self.output_dim() == output,
            || {
                format!(
                    "{name} expects {input}x{output}, found {}x{}",
                    self.input_dim(),
                    self.output_dim()
                )
            },
        )
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: DVector<f64>,
    pub beta: DVector<f64>,
}

impl LayerNormWeights {
    /// Scale one, shift zero.
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: DVector::from_element(dim, 1.0),
            beta: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// affine parameters.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = x.ncols();
        let mut out = x.clone();
        for mut row in out.row_iter_mut() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..d {
                row[c] = (row[c] - mean) * inv * self.gamma[c] + self.beta[c];
            }
        }
        out
    }

    fn check(&self, dim: usize, name: &str) -> Result<(), AttentionError> {
        require(self.gamma.len() == dim && self.beta.len() == dim, || {
            format!(
                "{name} expects dim {dim}, found gamma {} / beta {}",
                self.gamma.len(),
                self.beta.len()
            )
        })
    }
}

/// Two-layer position-wise feed-forward block with ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardWeights {
    pub lin1: LinearWeights,
    pub lin2: LinearWeights,
}

impl FeedForwardWeights {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut hidden = self.lin1.apply(x);
        hidden.apply(|v| *v = v.max(0.0));
        self.lin2.apply(&hidden)
    }
}

/// One residual attention block: multi-head attention, then add & normalize,
/// then feed-forward, then add & normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockWeights {
    pub w_q: LinearWeights,
    pub w_k: LinearWeights,
    pub w_v: LinearWeights,
    /// Projection of the pairwise embedding into key space; present only for
    /// neighborhood attention that uses a pair bias.
    pub w_r: Option<LinearWeights>,
    pub w_o: LinearWeights,
    pub norm_attn: LayerNormWeights,
    pub norm_ffn: LayerNormWeights,
    pub ffn: FeedForwardWeights,
}

impl AttentionBlockWeights {
    fn check(
        &self,
        d: usize,
        d_t: usize,
        pair_bias: bool,
        name: &str,
    ) -> Result<(), AttentionError> {
        self.w_q.check(d, d, &format!("{name}.w_q"))?;
        self.w_k.check(d, d, &format!("{name}.w_k"))?;
        self.w_v.check(d, d, &format!("{name}.w_v"))?;
        self.w_o.check(d, d, &format!("{name}.w_o"))?;
        match (&self.w_r, pair_bias) {
            (Some(w_r), true) => w_r.check(d_t, d, &format!("{name}.w_r"))?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(AttentionError::ShapeMismatch(format!(
                    "{name} must not carry a pair-bias projection"
                )))
            }
            (None, true) => {
                return Err(AttentionError::ShapeMismatch(format!(
                    "{name} is missing its pair-bias projection"
                )))
            }
        }
        self.norm_attn.check(d, &format!("{name}.norm_attn"))?;
        self.norm_ffn.check(d, &format!("{name}.norm_ffn"))?;
        self.ffn.lin1.check(d, d, &format!("{name}.ffn.lin1"))?;
        self.ffn.lin2.check(d, d, &format!("{name}.ffn.lin2"))
    }
}

/// Weights of the instance-mask update.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskingBlockWeights {
    /// Neighborhood attention over scene superpoints biased by the geodesic
    /// pair embedding (its `w_r` projects that embedding).
    pub attn: AttentionBlockWeights,
    /// Projects the raw geodesic embedding for the classifier input.
    pub w_g: LinearWeights,
    /// Classifier hidden layer, input `d + d_t`.
    pub mlp1: LinearWeights,
    /// Classifier output layer, one confidence logit per slot.
    pub mlp2: LinearWeights,
}

impl MaskingBlockWeights {
    fn check(&self, d: usize, d_t: usize, name: &str) -> Result<(), AttentionError> {
        self.attn.check(d, d_t, true, &format!("{name}.attn"))?;
        self.w_g.check(d_t, d_t, &format!("{name}.w_g"))?;
        self.mlp1.check(d + d_t, d, &format!("{name}.mlp1"))?;
        self.mlp2.check(d, 1, &format!("{name}.mlp2"))
    }
}

/// Weights for one refinement iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationWeights {
    /// Structure-biased self-attention, shared by model and scene.
    pub self_geo: AttentionBlockWeights,
    /// Cross-attention, shared by both directions.
    pub cross: AttentionBlockWeights,
    pub masking: MaskingBlockWeights,
}

/// Complete parameter set of the refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    /// Width of the incoming per-superpoint descriptors.
    pub backbone_dim: usize,
    /// Working width of the attention stack.
    pub d: usize,
    /// Width of the pairwise embeddings.
    pub d_t: usize,
    pub heads: usize,
    /// Input projection `backbone_dim -> d`.
    pub w_in: LinearWeights,
    /// Output projection `d -> d`.
    pub w_out: LinearWeights,
    pub iterations: Vec<IterationWeights>,
}

/// Shape entry of the on-disk tensor listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

enum TensorRef<'a> {
    Matrix(&'a DMatrix<f64>),
    Vector(&'a DVector<f64>),
}

enum TensorMut<'a> {
    Matrix(&'a mut DMatrix<f64>),
    Vector(&'a mut DVector<f64>),
}

fn list_linear<'a>(out: &mut Vec<(String, TensorRef<'a>)>, prefix: &str, lin: &'a LinearWeights) {
    out.push((format!("{prefix}.weight"), TensorRef::Matrix(&lin.weight)));
    out.push((format!("{prefix}.bias"), TensorRef::Vector(&lin.bias)));
}

fn list_linear_mut<'a>(
    out: &mut Vec<(String, TensorMut<'a>)>,
    prefix: &str,
    lin: &'a mut LinearWeights,
) {
    out.push((
        format!("{prefix}.weight"),
        TensorMut::Matrix(&mut lin.weight),
    ));
    out.push((format!("{prefix}.bias"), TensorMut::Vector(&mut lin.bias)));
}

fn list_block<'a>(
    out: &mut Vec<(String, TensorRef<'a>)>,
    prefix: &str,
    b: &'a AttentionBlockWeights,
) {
    list_linear(out, &format!("{prefix}.w_q"), &b.w_q);
    list_linear(out, &format!("{prefix}.w_k"), &b.w_k);
    list_linear(out, &format!("{prefix}.w_v"), &b.w_v);
    if let Some(w_r) = &b.w_r {
        list_linear(out, &format!("{prefix}.w_r"), w_r);
    }
    list_linear(out, &format!("{prefix}.w_o"), &b.w_o);
    out.push((
        format!("{prefix}.norm_attn.gamma"),
        TensorRef::Vector(&b.norm_attn.gamma),
    ));
    out.push((
        format!("{prefix}.norm_attn.beta"),
        TensorRef::Vector(&b.norm_attn.beta),
    ));
    out.push((
        format!("{prefix}.norm_ffn.gamma"),
        TensorRef::Vector(&b.norm_ffn.gamma),
    ));
    out.push((
        format!("{prefix}.norm_ffn.beta"),
        TensorRef::Vector(&b.norm_ffn.beta),
    ));
    list_linear(out, &format!("{prefix}.ffn.lin1"), &b.ffn.lin1);
    list_linear(out, &format!("{prefix}.ffn.lin2"), &b.ffn.lin2);
}

fn list_block_mut<'a>(
    out: &mut Vec<(String, TensorMut<'a>)>,
    prefix: &str,
    b: &'a mut AttentionBlockWeights,
) {
    list_linear_mut(out, &format!("{prefix}.w_q"), &mut b.w_q);
    list_linear_mut(out, &format!("{prefix}.w_k"), &mut b.w_k);
    list_linear_mut(out, &format!("{prefix}.w_v"), &mut b.w_v);
    if let Some(w_r) = &mut b.w_r {
        list_linear_mut(out, &format!("{prefix}.w_r"), w_r);
    }
    list_linear_mut(out, &format!("{prefix}.w_o"), &mut b.w_o);
    out.push((
        format!("{prefix}.norm_attn.gamma"),
        TensorMut::Vector(&mut b.norm_attn.gamma),
    ));
    out.push((
        format!("{prefix}.norm_attn.beta"),
        TensorMut::Vector(&mut b.norm_attn.beta),
    ));
    out.push((
        format!("{prefix}.norm_ffn.gamma"),
        TensorMut::Vector(&mut b.norm_ffn.gamma),
    ));
    out.push((
        format!("{prefix}.norm_ffn.beta"),
        TensorMut::Vector(&mut b.norm_ffn.beta),
    ));
    list_linear_mut(out, &format!("{prefix}.ffn.lin1"), &mut b.ffn.lin1);
    list_linear_mut(out, &format!("{prefix}.ffn.lin2"), &mut b.ffn.lin2);
}

impl WeightSet {
    /// Checks the internal consistency of every tensor dimension.
    pub fn validate(&self) -> Result<(), AttentionError> {
        require(self.heads > 0, || "head count must be positive".to_string())?;
        require(self.d % self.heads == 0, || {
            format!("width {} is not divisible by {} heads", self.d, self.heads)
        })?;
        require(self.backbone_dim > 0 && self.d > 0 && self.d_t > 0, || {
            "all widths must be positive".to_string()
        })?;
        self.w_in.check(self.backbone_dim, self.d, "w_in")?;
        self.w_out.check(self.d, self.d, "w_out")?;
        for (t, it) in self.iterations.iter().enumerate() {
            it.self_geo
                .check(self.d, self.d_t, true, &format!("iter{t}.self_geo"))?;
            it.cross
                .check(self.d, self.d_t, false, &format!("iter{t}.cross"))?;
            it.masking
                .check(self.d, self.d_t, &format!("iter{t}.masking"))?;
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        list_linear(&mut out, "w_in", &self.w_in);
        list_linear(&mut out, "w_out", &self.w_out);
        for (t, it) in self.iterations.iter().enumerate() {
            list_block(&mut out, &format!("iter{t}.self_geo"), &it.self_geo);
            list_block(&mut out, &format!("iter{t}.cross"), &it.cross);
            list_block(&mut out, &format!("iter{t}.masking.attn"), &it.masking.attn);
            list_linear(&mut out, &format!("iter{t}.masking.w_g"), &it.masking.w_g);
            list_linear(&mut out, &format!("iter{t}.masking.mlp1"), &it.masking.mlp1);
            list_linear(&mut out, &format!("iter{t}.masking.mlp2"), &it.masking.mlp2);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::new();
        list_linear_mut(&mut out, "w_in", &mut self.w_in);
        list_linear_mut(&mut out, "w_out", &mut self.w_out);
        for (t, it) in self.iterations.iter_mut().enumerate() {
            list_block_mut(&mut out, &format!("iter{t}.self_geo"), &mut it.self_geo);
            list_block_mut(&mut out, &format!("iter{t}.cross"), &mut it.cross);
            list_block_mut(
                &mut out,
                &format!("iter{t}.masking.attn"),
                &mut it.masking.attn,
            );
            list_linear_mut(
                &mut out,
                &format!("iter{t}.masking.w_g"),
                &mut it.masking.w_g,
            );
            list_linear_mut(
                &mut out,
                &format!("iter{t}.masking.mlp1"),
                &mut it.masking.mlp1,
            );
            list_linear_mut(
                &mut out,
                &format!("iter{t}.masking.mlp2"),
                &mut it.masking.mlp2,
            );
        }
        out
    }

    /// Canonical tensor listing (names and shapes) in serialization order.
    /// Vectors are listed as a single row.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| match t {
                TensorRef::Matrix(m) => TensorSpec {
                    name,
                    rows: m.nrows(),
                    cols: m.ncols(),
                },
                TensorRef::Vector(v) => TensorSpec {
                    name,
                    rows: 1,
                    cols: v.len(),
                },
            })
            .collect()
    }

    /// Concatenates every tensor row-major in [`Self::tensor_specs`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut data = Vec::new();
        for (_, t) in self.tensors() {
            match t {
                TensorRef::Matrix(m) => {
                    for r in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            data.push(m[(r, c)]);
                        }
                    }
                }
                TensorRef::Vector(v) => data.extend(v.iter().copied()),
            }
        }
        data
    }

    /// Overwrites every tensor from a flat row-major buffer laid out exactly
    /// as [`Self::flatten`] produces.
    pub fn fill_from_slice(&mut self, data: &[f64]) -> Result<(), AttentionError> {
        let mut offset = 0usize;
        for (name, t) in self.tensors_mut() {
            match t {
                TensorMut::Matrix(m) => {
                    let len = m.nrows() * m.ncols();
                    require(offset + len <= data.len(), || {
                        format!("weight buffer too short while reading {name}")
                    })?;
                    let (rows, cols) = (m.nrows(), m.ncols());
                    for r in 0..rows {
                        for c in 0..cols {
                            m[(r, c)] = data[offset + r * cols + c];
                        }
                    }
                    offset += len;
                }
                TensorMut::Vector(v) => {
                    let len = v.len();
                    require(offset + len <= data.len(), || {
                        format!("weight buffer too short while reading {name}")
                    })?;
                    for i in 0..len {
                        v[i] = data[offset + i];
                    }
                    offset += len;
                }
            }
        }
        require(offset == data.len(), || {
            format!(
                "weight buffer holds {} values, expected {offset}",
                data.len()
            )
        })
    }

    /// All-zero parameter skeleton (norm scales one) with the given shape.
    pub fn zeroed(
        backbone_dim: usize,
        d: usize,
        d_t: usize,
        heads: usize,
        iterations: usize,
    ) -> Result<Self, AttentionError> {
        build_weight_set(
            backbone_dim,
            d,
            d_t,
            heads,
            iterations,
            &mut |rows, cols| DMatrix::zeros(rows, cols),
        )
    }
}

fn build_weight_set(
    backbone_dim: usize,
    d: usize,
    d_t: usize,
    heads: usize,
    iterations: usize,
    fill: &mut dyn FnMut(usize, usize) -> DMatrix<f64>,
) -> Result<WeightSet, AttentionError> {
    let lin = |fill: &mut dyn FnMut(usize, usize) -> DMatrix<f64>, inp: usize, out: usize| {
        LinearWeights {
            weight: fill(inp, out),
            bias: DVector::zeros(out),
        }
    };
    let block = |fill: &mut dyn FnMut(usize, usize) -> DMatrix<f64>, pair_bias: bool| {
        AttentionBlockWeights {
            w_q: lin(fill, d, d),
            w_k: lin(fill, d, d),
            w_v: lin(fill, d, d),
            w_r: pair_bias.then(|| lin(fill, d_t, d)),
            w_o: lin(fill, d, d),
            norm_attn: LayerNormWeights::identity(d),
            norm_ffn: LayerNormWeights::identity(d),
            ffn: FeedForwardWeights {
                lin1: lin(fill, d, d),
                lin2: lin(fill, d, d),
            },
        }
    };
    let set = WeightSet {
        backbone_dim,
        d,
        d_t,
        heads,
        w_in: lin(fill, backbone_dim, d),
        w_out: lin(fill, d, d),
        iterations: (0..iterations)
            .map(|_| IterationWeights {
                self_geo: block(fill, true),
                cross: block(fill, false),
                masking: MaskingBlockWeights {
                    attn: block(fill, true),
                    w_g: lin(fill, d_t, d_t),
                    mlp1: lin(fill, d + d_t, d),
                    mlp2: lin(fill, d, 1),
                },
            })
            .collect(),
    };
    set.validate()?;
    Ok(set)
}

/// Seeded random parameters: every matrix entry is drawn uniformly from
/// `±1/sqrt(fan_in)` and rounded through `f32`, so saving to the 32-bit
/// on-disk format and loading back reproduces the set exactly. Biases start
/// at zero and norms at identity.
pub fn random_weight_set(
    backbone_dim: usize,
    d: usize,
    d_t: usize,
    heads: usize,
    iterations: usize,
    seed: u64,
) -> Result<WeightSet, AttentionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_weight_set(
        backbone_dim,
        d,
        d_t,
        heads,
        iterations,
        &mut |rows, cols| {
            let bound = 1.0 / (rows as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| {
                (rng.random_range(-bound..bound) as f32) as f64
            })
        },
    )
}

/// Feature-preserving parameters: identity input/output projections over
/// otherwise zero attention weights, so every block reduces to its layer
/// norms and identical input rows stay identical through the whole forward
/// pass. Useful wherever matchable features must survive the transformer
/// untrained (calibration runs, end-to-end fixtures).
///
/// Requires `backbone_dim == d`. The mask MLP is zero too, so mask *updates*
/// collapse to the self slot; pair this with a fixed mask override when
/// neighbourhood masks matter.
pub fn passthrough_weight_set(
    d: usize,
    d_t: usize,
    heads: usize,
    iterations: usize,
) -> Result<WeightSet, AttentionError> {
    let mut set = WeightSet::zeroed(d, d, d_t, heads, iterations)?;
    set.w_in.weight = DMatrix::identity(d, d);
    set.w_out.weight = DMatrix::identity(d, d);
    Ok(set)
}

// ---------------------------------------------------------------------------
// Instance mask
// ---------------------------------------------------------------------------

/// Per-anchor, per-slot gating of scene neighborhood attention, with the
/// confidence each decision was made at.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub allowed: Vec<Vec<bool>>,
    pub confidence: Vec<Vec<f64>>,
}

impl InstanceMask {
    /// Everything allowed at full confidence.
    pub fn all_allowed(anchors: usize, slots: usize) -> Self {
        Self {
            allowed: vec![vec![true; slots]; anchors],
            confidence: vec![vec![1.0; slots]; anchors],
        }
    }

    /// Thresholds confidences at `tau` (inclusive).
    pub fn from_confidence(confidence: Vec<Vec<f64>>, tau: f64) -> Self {
        let allowed = confidence
            .iter()
            .map(|row| row.iter().map(|&c| c >= tau).collect())
            .collect();
        Self {
            allowed,
            confidence,
        }
    }

    /// Hard mask from boolean decisions; confidence mirrors them as 1/0.
    pub fn from_allowed(allowed: Vec<Vec<bool>>) -> Self {
        let confidence = allowed
            .iter()
            .map(|row| row.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            allowed,
            confidence,
        }
    }

    fn check(&self, anchors: usize, slots: usize) -> Result<(), AttentionError> {
        require(
            self.allowed.len() == anchors && self.confidence.len() == anchors,
            || {
                format!(
                    "mask covers {} anchors, expected {anchors}",
                    self.allowed.len()
                )
            },
        )?;
        for (i, (a, c)) in self.allowed.iter().zip(&self.confidence).enumerate() {
            require(a.len() == slots && c.len() == slots, || {
                format!("mask row {i} has {} slots, expected {slots}", a.len())
            })?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Attention blocks
// ---------------------------------------------------------------------------

fn validate_neighborhood(
    feats: &FeatureMatrix,
    slots: &[Vec<usize>],
    pair: &PairEmbedding,
    mask: Option<&InstanceMask>,
    block: &AttentionBlockWeights,
    heads: usize,
) -> Result<(), AttentionError> {
    if feats.nrows() == 0 {
        return Err(AttentionError::EmptyFeatures);
    }
    let n = feats.nrows();
    let d = feats.ncols();
    require(heads > 0 && d % heads == 0, || {
        format!("width {d} is not divisible by {heads} heads")
    })?;
    block.check(d, pair.dim(), true, "neighborhood block")?;
    require(slots.len() == n, || {
        format!("{} slot lists for {n} feature rows", slots.len())
    })?;
    require(pair.anchors == n, || {
        format!(
            "pair embedding covers {} anchors, expected {n}",
            pair.anchors
        )
    })?;
    for (i, row) in slots.iter().enumerate() {
        require(row.len() == pair.slots, || {
            format!(
                "slot list {i} has {} entries, embedding expects {}",
                row.len(),
                pair.slots
            )
        })?;
        if let Some(&bad) = row.iter().find(|&&j| j >= n) {
            return Err(AttentionError::ShapeMismatch(format!(
                "slot list {i} references row {bad} of {n}"
            )));
        }
    }
    if let Some(m) = mask {
        m.check(n, pair.slots)?;
    }
    Ok(())
}

/// Multi-head attention over each anchor's neighborhood slots, with the pair
/// embedding projected into key space, followed by the residual feed-forward
/// tail. `mask` (if any) disallows slots additively via [`MASKED_SCORE`].
pub fn geometric_encoding_block(
    feats: &FeatureMatrix,
    slots: &[Vec<usize>],
    pair: &PairEmbedding,
    mask: Option<&InstanceMask>,
    block: &AttentionBlockWeights,
    heads: usize,
) -> Result<FeatureMatrix, AttentionError> {
    validate_neighborhood(feats, slots, pair, mask, block, heads)?;
    let n = feats.nrows();
    let d = feats.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = block.w_q.apply(feats);
    let k = block.w_k.apply(feats);
    let v = block.w_v.apply(feats);
    let w_r = block.w_r.as_ref().expect("validated");
    let r = w_r.apply(&pair.values);
    let slot_count = pair.slots;

    let mut attn = DMatrix::zeros(n, d);
    let mut scores = vec![0.0f64; slot_count];
    for i in 0..n {
        for h in 0..heads {
            let off = h * dh;
            let mut max_score = f64::NEG_INFINITY;
            for (c, &j) in slots[i].iter().enumerate() {
                let mut s = 0.0;
                let pair_row = i * slot_count + c;
                for t in 0..dh {
                    s += q[(i, off + t)] * (k[(j, off + t)] + r[(pair_row, off + t)]);
                }
                s *= scale;
                if let Some(m) = mask {
                    if !m.allowed[i][c] {
                        s += MASKED_SCORE;
                    }
                }
                scores[c] = s;
                max_score = max_score.max(s);
            }
            let mut denom = 0.0;
            for s in scores[..slot_count].iter_mut() {
                *s = (*s - max_score).exp();
                denom += *s;
            }
            for (c, &j) in slots[i].iter().enumerate() {
                let w = scores[c] / denom;
                if w != 0.0 {
                    for t in 0..dh {
                        attn[(i, off + t)] += w * v[(j, off + t)];
                    }
                }
            }
        }
    }
    Ok(finish_block(feats, &block.w_o.apply(&attn), block))
}

/// Full attention from every row of `x` to every row of `y`, followed by the
/// residual feed-forward tail on `x`.
pub fn cross_attention_block(
    x: &FeatureMatrix,
    y: &FeatureMatrix,
    block: &AttentionBlockWeights,
    heads: usize,
) -> Result<FeatureMatrix, AttentionError> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(AttentionError::EmptyFeatures);
    }
    let d = x.ncols();
    require(y.ncols() == d, || {
        format!("cross inputs disagree on width: {d} vs {}", y.ncols())
    })?;
    require(heads > 0 && d % heads == 0, || {
        format!("width {d} is not divisible by {heads} heads")
    })?;
    block.check(d, 0, false, "cross block")?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = block.w_q.apply(x);
    let k = block.w_k.apply(y);
    let v = block.w_v.apply(y);
    let m = y.nrows();

    let mut attn = DMatrix::zeros(x.nrows(), d);
    let mut scores = vec![0.0f64; m];
    for i in 0..x.nrows() {
        for h in 0..heads {
            let off = h * dh;
            let mut max_score = f64::NEG_INFINITY;
            for (j, s_out) in scores.iter_mut().enumerate() {
                let mut s = 0.0;
                for t in 0..dh {
                    s += q[(i, off + t)] * k[(j, off + t)];
                }
                s *= scale;
                *s_out = s;
                max_score = max_score.max(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max_score).exp();
                denom += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / denom;
                for t in 0..dh {
                    attn[(i, off + t)] += w * v[(j, off + t)];
                }
            }
        }
    }
    Ok(finish_block(x, &block.w_o.apply(&attn), block))
}

fn finish_block(
    x: &FeatureMatrix,
    attn_out: &FeatureMatrix,
    block: &AttentionBlockWeights,
) -> FeatureMatrix {
    let x1 = block.norm_attn.apply(&(x + attn_out));
    let fed = block.ffn.apply(&x1);
    block.norm_ffn.apply(&(x1 + fed))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Re-estimates the instance mask: scene features pass through one
/// geodesic-biased neighborhood attention block (restricted by the previous
/// mask), then each slot is scored by a two-layer classifier on the feature
/// difference to its anchor concatenated with the projected geodesic
/// embedding. Slot 0 (the anchor itself) is always kept at confidence one.
pub fn instance_masking_block(
    feats: &FeatureMatrix,
    slots: &[Vec<usize>],
    geodesic: &PairEmbedding,
    prev_mask: &InstanceMask,
    weights: &MaskingBlockWeights,
    heads: usize,
    tau: f64,
) -> Result<InstanceMask, AttentionError> {
    let y = geometric_encoding_block(
        feats,
        slots,
        geodesic,
        Some(prev_mask),
        &weights.attn,
        heads,
    )?;
    let d = y.ncols();
    let d_t = geodesic.dim();
    weights.w_g.check(d_t, d_t, "masking.w_g")?;
    weights.mlp1.check(d + d_t, d, "masking.mlp1")?;
    weights.mlp2.check(d, 1, "masking.mlp2")?;
    let g = weights.w_g.apply(&geodesic.values);
    let slot_count = geodesic.slots;

    let mut confidence = Vec::with_capacity(slots.len());
    let mut input = DMatrix::zeros(1, d + d_t);
    for (i, slot_list) in slots.iter().enumerate() {
        let mut row = Vec::with_capacity(slot_count);
        for (c, &j) in slot_list.iter().enumerate() {
            if c == 0 {
                row.push(1.0);
                continue;
            }
            for t in 0..d {
                input[(0, t)] = y[(j, t)] - y[(i, t)];
            }
            let pair_row = i * slot_count + c;
            for t in 0..d_t {
                input[(0, d + t)] = g[(pair_row, t)];
            }
            let mut hidden = weights.mlp1.apply(&input);
            hidden.apply(|v| *v = v.max(0.0));
            let logit = weights.mlp2.apply(&hidden)[(0, 0)];
            row.push(sigmoid(logit));
        }
        confidence.push(row);
    }
    Ok(InstanceMask::from_confidence(confidence, tau))
}

// ---------------------------------------------------------------------------
// Full forward pass
// ---------------------------------------------------------------------------

/// Everything the refinement stage consumes.
pub struct TransformerInputs<'a> {
    /// Model superpoint descriptors, `n_p x backbone_dim`.
    pub p_features: &'a FeatureMatrix,
    /// Scene superpoint descriptors, `n_q x backbone_dim`.
    pub q_features: &'a FeatureMatrix,
    /// Model neighborhood slot lists (slot 0 is the anchor itself).
    pub p_slots: &'a [Vec<usize>],
    /// Scene neighborhood slot lists.
    pub q_slots: &'a [Vec<usize>],
    /// Structure embedding of the model neighborhoods.
    pub p_structure: &'a PairEmbedding,
    /// Structure embedding of the scene neighborhoods.
    pub q_structure: &'a PairEmbedding,
    /// Geodesic embedding of the scene neighborhoods (mask update input).
    pub q_geodesic: &'a PairEmbedding,
    /// Confidence threshold for mask decisions.
    pub mask_tau: f64,
    /// Fixed mask to use instead of the learned update (e.g. derived from
    /// ground truth in evaluation harnesses). The update step is skipped.
    pub mask_override: Option<&'a InstanceMask>,
}

/// Refined features for both clouds plus the final instance mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerOutput {
    pub p_features: FeatureMatrix,
    pub q_features: FeatureMatrix,
    pub mask: InstanceMask,
}

/// Runs the full interleaved refinement: per iteration, model self-attention,
/// masked scene self-attention, model-to-scene cross-attention, scene-to-model
/// cross-attention, then the mask update. Starts from the all-allowed mask
/// unless an override is supplied.
pub fn run_transformer(
    inputs: &TransformerInputs<'_>,
    weights: &WeightSet,
) -> Result<TransformerOutput, AttentionError> {
    weights.validate()?;
    if inputs.p_features.nrows() == 0 || inputs.q_features.nrows() == 0 {
        return Err(AttentionError::EmptyFeatures);
    }
    require(inputs.p_features.ncols() == weights.backbone_dim, || {
        format!(
            "model features are {} wide, weights expect {}",
            inputs.p_features.ncols(),
            weights.backbone_dim
        )
    })?;
    require(inputs.q_features.ncols() == weights.backbone_dim, || {
        format!(
            "scene features are {} wide, weights expect {}",
            inputs.q_features.ncols(),
            weights.backbone_dim
        )
    })?;
    for (pair, name) in [
        (inputs.p_structure, "model structure"),
        (inputs.q_structure, "scene structure"),
        (inputs.q_geodesic, "scene geodesic"),
    ] {
        require(pair.dim() == weights.d_t, || {
            format!(
                "{name} embedding is {} wide, weights expect {}",
                pair.dim(),
                weights.d_t
            )
        })?;
    }
    let n_q = inputs.q_features.nrows();
    let q_slot_count = inputs.q_structure.slots;
    require(inputs.q_geodesic.slots == q_slot_count, || {
        format!(
            "scene geodesic embedding has {} slots, structure has {q_slot_count}",
            inputs.q_geodesic.slots
        )
    })?;

    let mut f_p = weights.w_in.apply(inputs.p_features);
    let mut f_q = weights.w_in.apply(inputs.q_features);
    let mut mask = match inputs.mask_override {
        Some(m) => {
            m.check(n_q, q_slot_count)?;
            m.clone()
        }
        None => InstanceMask::all_allowed(n_q, q_slot_count),
    };

    for it in &weights.iterations {
        f_p = geometric_encoding_block(
            &f_p,
            inputs.p_slots,
            inputs.p_structure,
            None,
            &it.self_geo,
            weights.heads,
        )?;
        f_q = geometric_encoding_block(
            &f_q,
            inputs.q_slots,
            inputs.q_structure,
            Some(&mask),
            &it.self_geo,
            weights.heads,
        )?;
        let f_p_new = cross_attention_block(&f_p, &f_q, &it.cross, weights.heads)?;
        f_q = cross_attention_block(&f_q, &f_p_new, &it.cross, weights.heads)?;
        f_p = f_p_new;
        if inputs.mask_override.is_none() {
            mask = instance_masking_block(
                &f_q,
                inputs.q_slots,
                inputs.q_geodesic,
                &mask,
                &it.masking,
                weights.heads,
                inputs.mask_tau,
            )?;
        }
    }

    Ok(TransformerOutput {
        p_features: weights.w_out.apply(&f_p),
        q_features: weights.w_out.apply(&f_q),
        mask,
    })
}
