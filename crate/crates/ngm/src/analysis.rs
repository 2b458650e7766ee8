//! Mechanistic analysis: residual alignment and cross-position locality.
//!
//! The alignment study asks whether hidden states line up with the pooled
//! n-gram vectors better than chance. For every layer (the raw embeddings
//! plus each block output) it reports the mean cosine between matched
//! positions, against two controls: the same n-gram rows permuted within
//! the sequence ("shuffled") and n-grams built from uniformly resampled
//! token ids ("random"). The forward pass runs unhooked, since the point is
//! whether the base model's states already align.
//!
//! The locality study runs the decoder with injection enabled and maps the
//! full cross-position cosine matrix `C[i][j] = cos(h_i, g_j)` at one layer;
//! a dominant diagonal means the useful signal is concentrated at the
//! aligned position.
//!
//! Means are taken over scales first, then positions, then sequences, and
//! the order is recorded in every report.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::NgmConfig;
use crate::decoder::{Decoder, FeatureMode, NgmRunner, ToyDecoderConfig};
use crate::error::{Error, Result};
use crate::inject::{cosine_pair, HiddenStates};
use crate::ngram::{apply_compressed_map, encode_causal_ngrams, NgramStack, TokenId};
use crate::rng::DetRng;

pub const AVERAGING_ORDER: &str = "scales,positions,sequences";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub ngm: NgmConfig,
    pub decoder: ToyDecoderConfig,
    pub averaging: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeeds {
    pub decoder_seed: u64,
    pub control_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSeries {
    pub actual: Vec<f64>,
    pub shuffled: Vec<f64>,
    pub random: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub sequences: usize,
    pub positions: usize,
    /// Per layer: actual > shuffled > random, strictly.
    pub ordering_per_layer: Vec<bool>,
    pub ordering_all_layers: bool,
}

/// Per-layer mean cosine between hidden states and n-gram vectors, with
/// shuffled and random controls. Series index 0 is the embedding layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProfile {
    pub kind: String,
    pub config: ConfigSnapshot,
    pub seeds: AlignmentSeeds,
    pub series: AlignmentSeries,
    pub summary: AlignmentSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalitySeeds {
    pub decoder_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalitySummary {
    pub layer: usize,
    pub diag_mean: f64,
    pub offdiag_mean: f64,
    /// `diag_mean / offdiag_mean`; absent when the off-diagonal mean is
    /// too close to zero to divide by.
    pub ratio: Option<f64>,
}

/// Cross-position cosine matrix at one layer, averaged over scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub kind: String,
    pub config: ConfigSnapshot,
    pub seeds: LocalitySeeds,
    pub matrix: Vec<Vec<f64>>,
    pub summary: LocalitySummary,
}

fn snapshot(config: &NgmConfig, decoder: &Decoder) -> ConfigSnapshot {
    ConfigSnapshot {
        ngm: config.clone(),
        decoder: decoder.config().clone(),
        averaging: AVERAGING_ORDER.to_string(),
    }
}

/// Mask for one sequence under a config whose mask may be shorter or longer
/// than the sequence: missing positions count as text.
fn effective_mask(config: &NgmConfig, len: usize) -> Option<Vec<bool>> {
    config
        .text_mask
        .as_ref()
        .map(|m| (0..len).map(|p| m.get(p).copied().unwrap_or(true)).collect())
}

fn encode_for_analysis(
    ids: &[TokenId],
    decoder: &Decoder,
    config: &NgmConfig,
) -> Result<NgramStack> {
    let mapped;
    let effective: &[TokenId] = match &config.compressed_map {
        Some(map) => {
            mapped = apply_compressed_map(ids, map);
            &mapped
        }
        None => ids,
    };
    let mask = effective_mask(config, ids.len());
    encode_causal_ngrams(
        effective,
        decoder.embedding_table(),
        &config.sizes,
        mask.as_deref(),
    )
}

/// Mean over positions of the scale-averaged cosine between hidden row `t`
/// and n-gram row `perm[t]` (or `t` when no permutation is given).
fn mean_alignment(hidden: &HiddenStates, stack: &NgramStack, perm: Option<&[usize]>) -> f64 {
    let rows = hidden.rows();
    let scales = stack.num_scales();
    let mut total = 0.0f64;
    for t in 0..rows {
        let src = perm.map_or(t, |p| p[t]);
        let mut per_position = 0.0f64;
        for i in 0..scales {
            per_position += cosine_pair(hidden.row(t), stack.vector(src, i)) as f64;
        }
        total += per_position / scales as f64;
    }
    total / rows as f64
}

/// Full cross-position matrix `C[i][j]`, averaged over scales.
pub fn cross_position_matrix(hidden: &HiddenStates, stack: &NgramStack) -> Result<Vec<Vec<f64>>> {
    if hidden.rows() != stack.len() || hidden.dim() != stack.dim() {
        return Err(Error::Shape(format!(
            "hidden is {}x{}, stack is {}x{}",
            hidden.rows(),
            hidden.dim(),
            stack.len(),
            stack.dim()
        )));
    }
    let rows = hidden.rows();
    let scales = stack.num_scales();
    let mut matrix = vec![vec![0.0f64; rows]; rows];
    for (i, out_row) in matrix.iter_mut().enumerate() {
        for (j, cell) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for s in 0..scales {
                acc += cosine_pair(hidden.row(i), stack.vector(j, s)) as f64;
            }
            *cell = acc / scales as f64;
        }
    }
    Ok(matrix)
}

/// Alignment-vs-controls profile over a corpus. The decoder runs without
/// injection; controls are seeded from `control_seed` (stream `2*seq` for
/// the permutation, `2*seq + 1` for the random ids of sequence `seq`).
pub fn alignment_profile(
    decoder: &Decoder,
    corpus: &[Vec<TokenId>],
    config: &NgmConfig,
    control_seed: u64,
) -> Result<AlignmentProfile> {
    config.validate()?;
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyInput("alignment corpus is empty".into()));
    }
    let layers = decoder.config().num_layers + 1;
    let mut actual = vec![0.0f64; layers];
    let mut shuffled = vec![0.0f64; layers];
    let mut random = vec![0.0f64; layers];
    let mut sequences = 0usize;
    let mut positions = 0usize;

    for (seq_idx, ids) in corpus.iter().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let capture = decoder
            .prefill(ids, None, true)?
            .capture
            .expect("capture requested");
        let stack = encode_for_analysis(ids, decoder, config)?;

        let perm = DetRng::derive(control_seed, 2 * seq_idx as u64).permutation(ids.len());
        let mut rng = DetRng::derive(control_seed, 2 * seq_idx as u64 + 1);
        let vocab = decoder.config().vocab_size as u64;
        let random_ids: Vec<TokenId> =
            (0..ids.len()).map(|_| rng.below(vocab) as TokenId).collect();
        let random_stack = encode_for_analysis(&random_ids, decoder, config)?;

        let mut states: Vec<&HiddenStates> = Vec::with_capacity(layers);
        states.push(&capture.embedding);
        states.extend(capture.blocks.iter());
        for (l, hidden) in states.into_iter().enumerate() {
            actual[l] += mean_alignment(hidden, &stack, None);
            shuffled[l] += mean_alignment(hidden, &stack, Some(&perm));
            random[l] += mean_alignment(hidden, &random_stack, None);
        }
        sequences += 1;
        positions += ids.len();
    }

    let n = sequences as f64;
    for series in [&mut actual, &mut shuffled, &mut random] {
        for v in series.iter_mut() {
            *v /= n;
        }
    }
    let ordering_per_layer: Vec<bool> = (0..layers)
        .map(|l| actual[l] > shuffled[l] && shuffled[l] > random[l])
        .collect();
    let ordering_all_layers = ordering_per_layer.iter().all(|&b| b);

    Ok(AlignmentProfile {
        kind: "alignment".to_string(),
        config: snapshot(config, decoder),
        seeds: AlignmentSeeds {
            decoder_seed: decoder.config().seed,
            control_seed,
        },
        series: AlignmentSeries {
            actual,
            shuffled,
            random,
        },
        summary: AlignmentSummary {
            sequences,
            positions,
            ordering_per_layer,
            ordering_all_layers,
        },
    })
}

/// Cross-position locality at `layer` for one sample, with injection active
/// per the config. The probed hidden states are the block output before any
/// injection at that layer, i.e. exactly what the injector's gate sees.
pub fn locality_matrix(
    decoder: &Decoder,
    sample: &[TokenId],
    config: &NgmConfig,
    layer: usize,
) -> Result<LocalityReport> {
    config.validate()?;
    if layer >= decoder.config().num_layers {
        return Err(Error::Config(format!(
            "layer {layer} out of range for a {}-layer decoder",
            decoder.config().num_layers
        )));
    }
    if sample.len() < 2 {
        return Err(Error::EmptyInput(
            "locality sample must have at least 2 tokens".into(),
        ));
    }
    let mut runner = NgmRunner::from_config(
        config.clone(),
        decoder.config().num_layers,
        FeatureMode::Recompute,
    )?;
    let capture = decoder
        .prefill(sample, Some(&mut runner), true)?
        .capture
        .expect("capture requested");
    let hidden = &capture.blocks[layer];
    let stack = encode_for_analysis(sample, decoder, config)?;
    let matrix = cross_position_matrix(hidden, &stack)?;

    let rows = matrix.len();
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    let diag_mean = diag / rows as f64;
    let offdiag_mean = off / (rows * rows - rows) as f64;
    let ratio = if offdiag_mean.abs() < 1e-12 {
        None
    } else {
        Some(diag_mean / offdiag_mean)
    };

    Ok(LocalityReport {
        kind: "locality".to_string(),
        config: snapshot(config, decoder),
        seeds: LocalitySeeds {
            decoder_seed: decoder.config().seed,
        },
        matrix,
        summary: LocalitySummary {
            layer,
            diag_mean,
            offdiag_mean,
            ratio,
        },
    })
}

/// Serializes any report as pretty JSON.
pub fn export_report_json<T: Serialize>(report: &T, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read_report_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("report parse: {e}")))
}

/// Long-format CSV of the locality matrix: header `i,j,value`, one row per
/// matrix entry.
pub fn export_matrix_csv(report: &LocalityReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("i,j,value\n");
    for (i, row) in report.matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.push_str(&format!("{i},{j},{v}\n"));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Synthetic corpus with heavy repeated local patterns: each sequence is a
/// concatenation of motifs drawn from a small shared bank, with occasional
/// noise tokens.
pub fn synthetic_corpus(
    vocab_size: usize,
    num_sequences: usize,
    seq_len: usize,
    seed: u64,
) -> Vec<Vec<TokenId>> {
    let mut rng = DetRng::derive(seed, 0xc0b905);
    let num_motifs = 8;
    let motifs: Vec<Vec<TokenId>> = (0..num_motifs)
        .map(|_| {
            let len = 3 + rng.below(4) as usize;
            (0..len)
                .map(|_| rng.below(vocab_size as u64) as TokenId)
                .collect()
        })
        .collect();
    (0..num_sequences)
        .map(|_| {
            let mut seq = Vec::with_capacity(seq_len);
            while seq.len() < seq_len {
                if rng.below(100) < 85 {
                    let motif = &motifs[rng.below(num_motifs as u64) as usize];
                    for &tok in motif.iter().take(seq_len - seq.len()) {
                        seq.push(tok);
                    }
                } else {
                    seq.push(rng.below(vocab_size as u64) as TokenId);
                }
            }
            seq
        })
        .collect()
}
