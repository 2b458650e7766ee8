//! Hook placement and the per-session memory runner.
//!
//! The injector runs after the MLP block's residual add in the layers named
//! by a [`HookPlan`]. An [`NgmRunner`] owns everything one generation
//! session needs: the config, the feature mode (recompute over the full
//! prefix vs. an incremental streaming state), and an arithmetic-op counter
//! for the benchmark harness.

use std::collections::BTreeSet;

use crate::config::NgmConfig;
use crate::error::{Error, Result};
use crate::inject::{apply_fusion_counted, HiddenStates};
use crate::ngram::{
    encode_causal_ngrams_counted, EmbeddingTable, NgramStack, StreamingNgramState, TokenId,
};

/// 0-based layer ids where the injector runs, validated against the
/// decoder depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookPlan {
    layers: BTreeSet<usize>,
}

impl HookPlan {
    pub fn new(layers: impl IntoIterator<Item = usize>, num_layers: usize) -> Result<Self> {
        let layers: BTreeSet<usize> = layers.into_iter().collect();
        if let Some(&bad) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Config(format!(
                "injection layer {bad} out of range for a {num_layers}-layer decoder"
            )));
        }
        Ok(HookPlan { layers })
    }

    pub fn from_config(config: &NgmConfig, num_layers: usize) -> Result<Self> {
        HookPlan::new(config.injection_layers.iter().copied(), num_layers)
    }

    pub fn empty() -> Self {
        HookPlan {
            layers: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().copied()
    }
}

/// How n-gram features are produced during decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Re-encode the full prefix every step and slice the newest rows.
    Recompute,
    /// Keep a ring buffer of recent embeddings; constant work per step.
    Streaming,
}

/// Session state for running the memory module inside the decoder.
/// Single-writer, cloneable so benchmark runs can fork a warmed state.
#[derive(Debug, Clone)]
pub struct NgmRunner {
    config: NgmConfig,
    plan: HookPlan,
    mode: FeatureMode,
    stream: Option<StreamingNgramState>,
    ngm_ops: u64,
}

impl NgmRunner {
    pub fn new(config: NgmConfig, plan: HookPlan, mode: FeatureMode) -> Result<Self> {
        config.validate()?;
        Ok(NgmRunner {
            config,
            plan,
            mode,
            stream: None,
            ngm_ops: 0,
        })
    }

    /// Plan taken from the config's own injection layer set.
    pub fn from_config(config: NgmConfig, num_layers: usize, mode: FeatureMode) -> Result<Self> {
        let plan = HookPlan::from_config(&config, num_layers)?;
        NgmRunner::new(config, plan, mode)
    }

    pub fn config(&self) -> &NgmConfig {
        &self.config
    }

    pub fn plan(&self) -> &HookPlan {
        &self.plan
    }

    pub fn mode(&self) -> FeatureMode {
        self.mode
    }

    /// f32 operations spent in n-gram construction, gating, and injection
    /// since the last reset.
    pub fn ngm_ops(&self) -> u64 {
        self.ngm_ops
    }

    pub fn reset_ops(&mut self) {
        self.ngm_ops = 0;
    }

    /// Mask value for a global position: positions beyond the configured
    /// mask (e.g. freshly generated tokens) count as text.
    fn mask_at(&self, position: usize) -> bool {
        match &self.config.text_mask {
            Some(mask) => mask.get(position).copied().unwrap_or(true),
            None => true,
        }
    }

    fn mapped(&self, id: TokenId) -> TokenId {
        match &self.config.compressed_map {
            Some(map) => map.map(id),
            None => id,
        }
    }

    /// n-gram features aligned to the chunk's `chunk_len` newest positions,
    /// or `None` when no layer is hooked. In streaming mode the internal
    /// state must be positioned exactly at the chunk start.
    pub(crate) fn chunk_features(
        &mut self,
        full_prefix: &[TokenId],
        chunk_len: usize,
        table: &EmbeddingTable,
    ) -> Result<Option<NgramStack>> {
        if self.plan.is_empty() {
            return Ok(None);
        }
        let start = full_prefix.len() - chunk_len;
        match self.mode {
            FeatureMode::Recompute => {
                let mapped: Vec<TokenId> =
                    full_prefix.iter().map(|&id| self.mapped(id)).collect();
                let mask: Option<Vec<bool>> = self
                    .config
                    .text_mask
                    .as_ref()
                    .map(|_| (0..full_prefix.len()).map(|p| self.mask_at(p)).collect());
                let stack = encode_causal_ngrams_counted(
                    &mapped,
                    table,
                    &self.config.sizes,
                    mask.as_deref(),
                    &mut self.ngm_ops,
                )?;
                Ok(Some(stack.slice_last(chunk_len)?))
            }
            FeatureMode::Streaming => {
                if self.stream.is_none() {
                    self.stream = Some(StreamingNgramState::new(table, &self.config.sizes)?);
                }
                let NgmRunner {
                    config,
                    stream,
                    ngm_ops,
                    ..
                } = self;
                let state = stream.as_mut().expect("just initialized");
                if state.position() != start {
                    return Err(Error::Cache(format!(
                        "streaming n-gram state at position {} but chunk starts at {start}",
                        state.position()
                    )));
                }
                let dim = table.dim();
                let mut stack = NgramStack::empty(config.sizes.clone(), dim);
                let mut row = vec![0.0f32; config.sizes.len() * dim];
                for (i, &id) in full_prefix[start..].iter().enumerate() {
                    let masked = match &config.text_mask {
                        Some(mask) => !mask.get(start + i).copied().unwrap_or(true),
                        None => false,
                    };
                    let mapped = match &config.compressed_map {
                        Some(map) => map.map(id),
                        None => id,
                    };
                    state.push_masked_into(mapped, masked, table, &mut row, ngm_ops)?;
                    stack.push_position(&row)?;
                }
                Ok(Some(stack))
            }
        }
    }

    /// Scores the chunk features against this layer's hidden states and
    /// injects the gated update. Callers check the plan first.
    pub(crate) fn apply_layer(
        &mut self,
        hidden: &HiddenStates,
        features: &NgramStack,
    ) -> Result<HiddenStates> {
        apply_fusion_counted(hidden, features, &self.config, &mut self.ngm_ops)
    }
}
