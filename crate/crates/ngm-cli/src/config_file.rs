//! JSON config document: `{ngm, decoder, sampler, paths, seeds}`.
//!
//! Every field is optional; values resolve as CLI flag > config file >
//! built-in default. Unknown keys are rejected so typos surface instead of
//! silently falling back to defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ngm: Option<NgmSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedsSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgmSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub use_relu: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection_layers: Option<Vec<usize>>,
    /// streaming or recompute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tied_embeddings: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    /// greedy or sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comptok: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<u64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_populated_config_round_trips() {
        let cfg = FileConfig {
            ngm: Some(NgmSection {
                enabled: Some(true),
                sizes: Some(vec![2, 3]),
                output_scale: Some(0.1),
                use_relu: Some(true),
                fusion: Some("stack".into()),
                injection_layers: Some(vec![1, 14]),
                mode: Some("streaming".into()),
            }),
            decoder: Some(DecoderSection {
                num_layers: Some(4),
                dim: Some(64),
                num_heads: Some(4),
                vocab_size: Some(256),
                max_context: Some(4096),
                seed: Some(42),
                tied_embeddings: Some(true),
            }),
            sampler: Some(SamplerSection {
                kind: Some("sample".into()),
                temperature: Some(0.7),
                top_p: Some(0.8),
                top_k: Some(20),
                seed: Some(0),
            }),
            paths: Some(PathsSection {
                table: Some("t.ngme".into()),
                checkpoint: Some("ckpt".into()),
                comptok: Some("vocab.tsv".into()),
                mask: Some("mask.txt".into()),
                corpus: Some("corpus.txt".into()),
            }),
            seeds: Some(SeedsSection {
                control: Some(7),
                corpus: Some(1),
                prompt: Some(0),
            }),
        };
        let rendered = serde_json::to_string_pretty(&cfg).unwrap();
        let back = FileConfig::parse(&rendered).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_and_partial_configs_parse() {
        assert_eq!(FileConfig::parse("{}").unwrap(), FileConfig::default());
        let partial = FileConfig::parse(r#"{"ngm": {"output_scale": 0.3}}"#).unwrap();
        assert_eq!(partial.ngm.unwrap().output_scale, Some(0.3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FileConfig::parse(r#"{"ngm": {"scale": 0.3}}"#).is_err());
        assert!(FileConfig::parse(r#"{"bench": {}}"#).is_err());
    }
}
