//! Runtime configuration for the n-gram memory module.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::CompressedTokenMap;

/// How multiple n-gram scales are combined into one residual update.
///
/// `Stack` gives each scale its own cosine gate and sums the gated vectors.
/// `Concat` concatenates all scales, computes a single gate in the joint
/// space against the tiled hidden state, and scales the mean of the per-scale
/// vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Stack,
    Concat,
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fusion::Stack => write!(f, "stack"),
            Fusion::Concat => write!(f, "concat"),
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stack" => Ok(Fusion::Stack),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected \"stack\" or \"concat\")"
            ))),
        }
    }
}

/// Full configuration of the memory module.
///
/// `sizes` is the set of n-gram window lengths, `output_scale` the scalar
/// applied to every injected update, and `injection_layers` the 0-based
/// decoder layers whose block outputs receive the update. The optional
/// `compressed_map` and `text_mask` only affect n-gram construction, never
/// the backbone's own inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgmConfig {
    pub sizes: Vec<usize>,
    pub output_scale: f32,
    pub use_relu: bool,
    pub fusion: Fusion,
    pub injection_layers: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compressed_map: Option<CompressedTokenMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_mask: Option<Vec<bool>>,
}

impl Default for NgmConfig {
    /// Paper-default knobs: sizes {2, 3}, scale 0.1, ReLU on, stack fusion.
    /// Injection layers default to {1, 14}; use [`NgmConfig::for_depth`] to
    /// fit the layer set to a shallow decoder.
    fn default() -> Self {
        NgmConfig {
            sizes: vec![2, 3],
            output_scale: 0.1,
            use_relu: true,
            fusion: Fusion::Stack,
            injection_layers: BTreeSet::from([1, 14]),
            compressed_map: None,
            text_mask: None,
        }
    }
}

impl NgmConfig {
    /// Default config with injection layers chosen for a `num_layers`-deep
    /// decoder: one early layer (index 1) and one at roughly 0.4 of depth.
    pub fn for_depth(num_layers: usize) -> Self {
        NgmConfig {
            injection_layers: default_injection_layers(num_layers),
            ..NgmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::Config("n-gram sizes must be nonempty".into()));
        }
        for w in self.sizes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "n-gram sizes must be strictly increasing, got {:?}",
                    self.sizes
                )));
            }
        }
        if self.sizes[0] < 1 {
            return Err(Error::Config("n-gram sizes must be >= 1".into()));
        }
        if !self.output_scale.is_finite() || self.output_scale < 0.0 {
            return Err(Error::Config(format!(
                "output scale must be a nonnegative finite real, got {}",
                self.output_scale
            )));
        }
        Ok(())
    }

    pub fn max_size(&self) -> usize {
        *self.sizes.last().expect("validated config has sizes")
    }
}

/// Early + mid-depth placement: layer 1 and round(0.4 * num_layers),
/// clamped into range and deduplicated.
pub fn default_injection_layers(num_layers: usize) -> BTreeSet<usize> {
    let mut layers = BTreeSet::new();
    if num_layers == 0 {
        return layers;
    }
    layers.insert(1usize.min(num_layers - 1));
    let mid = ((num_layers as f64) * 0.4).round() as usize;
    layers.insert(mid.min(num_layers - 1));
    layers
}
