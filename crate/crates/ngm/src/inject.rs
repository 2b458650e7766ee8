//! Cosine-gated memory injection.
//!
//! Each decoder hidden state is scored against its per-scale n-gram vectors
//! with plain cosine similarity; scores are optionally ReLU-clipped so only
//! positively aligned memory is written back, and the gated vectors enter
//! the residual stream scaled by a fixed output scale. There are no learned
//! parameters anywhere on this path.
//!
//! Stack fusion gates each scale independently and sums the gated vectors.
//! Concat fusion computes a single gate in the concatenated scale space
//! (hidden state tiled to match) and scales the mean of the per-scale
//! vectors. For a single scale the two are the same computation.

use crate::config::{Fusion, NgmConfig};
use crate::error::{Error, Result};
use crate::ngram::{
    apply_compressed_map, encode_causal_ngrams_counted, EmbeddingTable, NgramStack, TokenId,
};

/// Norms below this are treated as zero: the cosine is defined as 0 and the
/// corresponding term injects nothing. Guarding here instead of adding an
/// epsilon to the denominator keeps genuine self-similarity at score 1.
pub const ZERO_NORM_EPS: f32 = 1e-12;

/// L x d block of decoder hidden states at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    layer_index: usize,
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl HiddenStates {
    pub fn new(layer_index: usize, rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "expected {} values for {rows}x{dim} hidden states, got {}",
                rows * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hidden states".into()));
        }
        Ok(HiddenStates {
            layer_index,
            rows,
            dim,
            values,
        })
    }

    pub(crate) fn from_vec_unchecked(
        layer_index: usize,
        rows: usize,
        dim: usize,
        values: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(values.len(), rows * dim);
        HiddenStates {
            layer_index,
            rows,
            dim,
            values,
        }
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.values
    }
}

/// L x |sizes| gate scores; raw cosines lie in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores {
    rows: usize,
    scales: usize,
    values: Vec<f32>,
}

impl GateScores {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn scales(&self) -> usize {
        self.scales
    }

    pub fn get(&self, t: usize, scale: usize) -> f32 {
        self.values[t * self.scales + scale]
    }

    pub fn raw(&self) -> &[f32] {
        &self.values
    }
}

/// L x d aggregated memory term; row t lies in the span of that position's
/// n-gram vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryUpdate {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl MemoryUpdate {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.values
    }

    /// The injected term itself: `scale * M`, elementwise.
    pub fn scaled(&self, scale: f32) -> Vec<f32> {
        self.values.iter().map(|&v| scale * v).collect()
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

#[inline]
fn cosine_from_parts(num: f32, norm_a: f32, norm_b: f32) -> f32 {
    if norm_a < ZERO_NORM_EPS || norm_b < ZERO_NORM_EPS {
        0.0
    } else {
        (num / (norm_a * norm_b)).clamp(-1.0, 1.0)
    }
}

/// Cosine between two vectors under the injector's zero-norm convention;
/// the same computation [`cosine_scores`] applies per position.
pub fn cosine_pair(a: &[f32], b: &[f32]) -> f32 {
    cosine_from_parts(dot(a, b), dot(a, a).sqrt(), dot(b, b).sqrt())
}

fn check_pair(hidden: &HiddenStates, ngrams: &NgramStack) -> Result<()> {
    if hidden.rows() != ngrams.len() {
        return Err(Error::Shape(format!(
            "{} hidden rows vs {} n-gram positions (slice the stack first)",
            hidden.rows(),
            ngrams.len()
        )));
    }
    if hidden.dim() != ngrams.dim() {
        return Err(Error::Shape(format!(
            "hidden dim {} vs n-gram dim {}",
            hidden.dim(),
            ngrams.dim()
        )));
    }
    Ok(())
}

/// Raw cosine similarity between every hidden row and each of its per-scale
/// n-gram vectors. `ngrams` must already be sliced to the hidden length.
pub fn cosine_scores(hidden: &HiddenStates, ngrams: &NgramStack) -> Result<GateScores> {
    let mut ops = 0u64;
    cosine_scores_counted(hidden, ngrams, &mut ops)
}

pub fn cosine_scores_counted(
    hidden: &HiddenStates,
    ngrams: &NgramStack,
    ops: &mut u64,
) -> Result<GateScores> {
    check_pair(hidden, ngrams)?;
    let rows = hidden.rows();
    let scales = ngrams.num_scales();
    let d = hidden.dim() as u64;
    let mut values = Vec::with_capacity(rows * scales);
    for t in 0..rows {
        let h = hidden.row(t);
        let norm_h = dot(h, h).sqrt();
        *ops += 2 * d + 1;
        for i in 0..scales {
            let g = ngrams.vector(t, i);
            let norm_g = dot(g, g).sqrt();
            let s = cosine_from_parts(dot(h, g), norm_h, norm_g);
            *ops += 4 * d + 3;
            values.push(s);
        }
    }
    Ok(GateScores {
        rows,
        scales,
        values,
    })
}

/// Elementwise `max(0, s)` when `use_relu` is set, identity otherwise.
pub fn relu_gate(mut scores: GateScores, use_relu: bool) -> GateScores {
    if use_relu {
        for s in &mut scores.values {
            *s = s.max(0.0);
        }
    }
    scores
}

/// Gated weighted sum over scales: `M[t] = sum_i gated[t][i] * g[t][i]`.
/// Terms with a zero gate are skipped, so a fully suppressed position
/// contributes an exactly zero row.
pub fn memory_update(ngrams: &NgramStack, gated: &GateScores) -> Result<MemoryUpdate> {
    let mut ops = 0u64;
    memory_update_counted(ngrams, gated, &mut ops)
}

pub fn memory_update_counted(
    ngrams: &NgramStack,
    gated: &GateScores,
    ops: &mut u64,
) -> Result<MemoryUpdate> {
    if gated.rows() != ngrams.len() || gated.scales() != ngrams.num_scales() {
        return Err(Error::Shape(format!(
            "gate scores are {}x{}, n-grams are {}x{}",
            gated.rows(),
            gated.scales(),
            ngrams.len(),
            ngrams.num_scales()
        )));
    }
    let rows = ngrams.len();
    let dim = ngrams.dim();
    let mut values = vec![0.0f32; rows * dim];
    for t in 0..rows {
        let out = &mut values[t * dim..(t + 1) * dim];
        for i in 0..ngrams.num_scales() {
            let s = gated.get(t, i);
            if s == 0.0 {
                continue;
            }
            let g = ngrams.vector(t, i);
            for (o, x) in out.iter_mut().zip(g.iter()) {
                *o += s * *x;
            }
            *ops += 2 * dim as u64;
        }
    }
    Ok(MemoryUpdate { rows, dim, values })
}

/// `h + scale * update`, preserving the layer index. A zero scale returns
/// the input bit-identically.
fn apply_residual(
    hidden: &HiddenStates,
    update: &MemoryUpdate,
    scale: f32,
    ops: &mut u64,
) -> HiddenStates {
    if scale == 0.0 {
        return hidden.clone();
    }
    let mut values = hidden.values.clone();
    for (v, u) in values.iter_mut().zip(update.values.iter()) {
        if *u != 0.0 {
            *v += scale * *u;
            *ops += 2;
        }
    }
    HiddenStates {
        layer_index: hidden.layer_index,
        rows: hidden.rows,
        dim: hidden.dim,
        values,
    }
}

/// Stack-fusion injection: per-scale gates, summed updates.
pub fn inject_stack(
    hidden: &HiddenStates,
    ngrams: &NgramStack,
    gated: &GateScores,
    scale: f32,
) -> Result<HiddenStates> {
    let mut ops = 0u64;
    inject_stack_counted(hidden, ngrams, gated, scale, &mut ops)
}

pub fn inject_stack_counted(
    hidden: &HiddenStates,
    ngrams: &NgramStack,
    gated: &GateScores,
    scale: f32,
    ops: &mut u64,
) -> Result<HiddenStates> {
    check_pair(hidden, ngrams)?;
    let update = memory_update_counted(ngrams, gated, ops)?;
    Ok(apply_residual(hidden, &update, scale, ops))
}

/// Concat-fusion injection: one joint-space gate scaling the mean vector.
pub fn inject_concat(
    hidden: &HiddenStates,
    ngrams: &NgramStack,
    use_relu: bool,
    scale: f32,
) -> Result<HiddenStates> {
    let mut ops = 0u64;
    inject_concat_counted(hidden, ngrams, use_relu, scale, &mut ops)
}

pub fn inject_concat_counted(
    hidden: &HiddenStates,
    ngrams: &NgramStack,
    use_relu: bool,
    scale: f32,
    ops: &mut u64,
) -> Result<HiddenStates> {
    check_pair(hidden, ngrams)?;
    let rows = hidden.rows();
    let dim = hidden.dim();
    let scales = ngrams.num_scales();
    let d = dim as u64;
    let mut values = vec![0.0f32; rows * dim];
    for t in 0..rows {
        let h = hidden.row(t);
        // Tiling h |N| times scales its squared norm by |N|; the dot with
        // the concatenation is the sum of the per-scale dots.
        let norm_h_tiled = (scales as f32 * dot(h, h)).sqrt();
        let mut num = 0.0f32;
        let mut gg = 0.0f32;
        for i in 0..scales {
            let g = ngrams.vector(t, i);
            num += dot(h, g);
            gg += dot(g, g);
        }
        let norm_concat = gg.sqrt();
        *ops += (4 * d + 2) * scales as u64 + 2 * d + 4;
        let mut s = cosine_from_parts(num, norm_h_tiled, norm_concat);
        if use_relu {
            s = s.max(0.0);
        }
        if s == 0.0 {
            continue;
        }
        let out = &mut values[t * dim..(t + 1) * dim];
        for i in 0..scales {
            let g = ngrams.vector(t, i);
            for (o, x) in out.iter_mut().zip(g.iter()) {
                *o += *x;
            }
        }
        let inv = scales as f32;
        for o in out.iter_mut() {
            *o = s * (*o / inv);
        }
        *ops += (scales as u64 + 2) * d;
    }
    let update = MemoryUpdate { rows, dim, values };
    Ok(apply_residual(hidden, &update, scale, ops))
}

/// End-to-end forward: encode the full prefix, align to the hidden rows,
/// gate per the fusion mode, and inject. Equivalent to composing the
/// individual operations by hand.
pub fn ngm_forward(
    ids: &[TokenId],
    hidden: &HiddenStates,
    table: &EmbeddingTable,
    config: &NgmConfig,
) -> Result<HiddenStates> {
    let mut ops = 0u64;
    ngm_forward_counted(ids, hidden, table, config, &mut ops)
}

pub fn ngm_forward_counted(
    ids: &[TokenId],
    hidden: &HiddenStates,
    table: &EmbeddingTable,
    config: &NgmConfig,
    ops: &mut u64,
) -> Result<HiddenStates> {
    config.validate()?;
    if hidden.rows() > ids.len() {
        return Err(Error::Shape(format!(
            "{} hidden rows but only {} prefix tokens",
            hidden.rows(),
            ids.len()
        )));
    }
    if hidden.rows() == 0 {
        return Ok(hidden.clone());
    }
    let mapped;
    let effective_ids = match &config.compressed_map {
        Some(map) => {
            mapped = apply_compressed_map(ids, map);
            &mapped[..]
        }
        None => ids,
    };
    let stack = encode_causal_ngrams_counted(
        effective_ids,
        table,
        &config.sizes,
        config.text_mask.as_deref(),
        ops,
    )?;
    let sliced = stack.slice_last(hidden.rows())?;
    apply_fusion_counted(hidden, &sliced, config, ops)
}

/// Scoring + injection for an already-aligned stack, per the fusion mode.
pub(crate) fn apply_fusion_counted(
    hidden: &HiddenStates,
    sliced: &NgramStack,
    config: &NgmConfig,
    ops: &mut u64,
) -> Result<HiddenStates> {
    match config.fusion {
        Fusion::Stack => {
            let raw = cosine_scores_counted(hidden, sliced, ops)?;
            let gated = relu_gate(raw, config.use_relu);
            inject_stack_counted(hidden, sliced, &gated, config.output_scale, ops)
        }
        Fusion::Concat => {
            inject_concat_counted(hidden, sliced, config.use_relu, config.output_scale, ops)
        }
    }
}
