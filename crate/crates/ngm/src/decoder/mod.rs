//! Frozen toy decoder with per-layer memory hooks.
//!
//! A small pre-norm decoder-only transformer: learned absolute positions,
//! causal multi-head attention, SiLU MLP, RMSNorm, optionally tied
//! embeddings. Weights are generated from a seed by a counter-based
//! generator, never trained, and never mutated. The memory injector runs
//! after the MLP block's residual add in the hooked layers.
//!
//! The prefill pass and cached decode steps share one chunked forward
//! implementation, so cached decoding reproduces full-recompute hidden
//! states exactly.

mod cache;
mod checkpoint;
mod hooks;
mod sampler;

pub use cache::KvCache;
pub use hooks::{FeatureMode, HookPlan, NgmRunner};
pub use sampler::{argmax, Sampler, SamplerConfig, SamplerKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::{dot, HiddenStates};
use crate::ngram::{EmbeddingTable, TokenId};
use crate::rng::DetRng;

const WEIGHT_STD: f32 = 0.02;
const RMS_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDecoderConfig {
    pub num_layers: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
    pub tied_embeddings: bool,
}

impl Default for ToyDecoderConfig {
    fn default() -> Self {
        ToyDecoderConfig {
            num_layers: 4,
            dim: 64,
            num_heads: 4,
            vocab_size: 256,
            max_context: 4096,
            seed: 42,
            tied_embeddings: true,
        }
    }
}

impl ToyDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.dim == 0
            || self.num_heads == 0
            || self.vocab_size == 0
            || self.max_context == 0
        {
            return Err(Error::Config(
                "decoder dimensions must all be positive".into(),
            ));
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "dim {} not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub(crate) attn_norm: Vec<f32>,
    pub(crate) wq: Vec<f32>,
    pub(crate) wk: Vec<f32>,
    pub(crate) wv: Vec<f32>,
    pub(crate) wo: Vec<f32>,
    pub(crate) mlp_norm: Vec<f32>,
    pub(crate) fc1: Vec<f32>,
    pub(crate) fc2: Vec<f32>,
}

/// Frozen decoder. Weights are immutable after construction and safe to
/// share across threads; every generation session owns its own cache and
/// runner exclusively.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: ToyDecoderConfig,
    embed: EmbeddingTable,
    pos: Vec<f32>,
    layers: Vec<LayerWeights>,
    final_norm: Vec<f32>,
    unembed: Option<Vec<f32>>,
}

/// Logits for a chunk of positions, row-major `rows x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    rows: usize,
    vocab: usize,
    values: Vec<f32>,
}

impl Logits {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn last(&self) -> &[f32] {
        self.row(self.rows - 1)
    }

    pub fn raw(&self) -> &[f32] {
        &self.values
    }
}

/// Hidden states captured during a forward pass: the raw token embeddings
/// (before positions are added) and each block's post-residual output,
/// recorded before any injection at that layer.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub embedding: HiddenStates,
    pub blocks: Vec<HiddenStates>,
}

pub struct PrefillOutput {
    pub logits: Logits,
    pub cache: KvCache,
    pub capture: Option<LayerCapture>,
}

struct Scratch {
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    act: Vec<f32>,
    scores: Vec<f32>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Scratch {
            normed: vec![0.0; dim],
            q: vec![0.0; dim],
            k: vec![0.0; dim],
            v: vec![0.0; dim],
            attn: vec![0.0; dim],
            proj: vec![0.0; dim],
            act: vec![0.0; 4 * dim],
            scores: Vec::new(),
        }
    }
}

#[inline]
fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(x.len())) {
        *o = dot(row, x);
    }
}

#[inline]
fn rmsnorm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = dot(x, x) / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &xi), &g) in out.iter_mut().zip(x.iter()).zip(gain.iter()) {
        *o = xi * inv * g;
    }
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl Decoder {
    /// Deterministically materializes a frozen decoder from its config.
    /// The same config (including seed) always yields identical weights.
    pub fn init(config: ToyDecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let gauss = |tag: u64, count: usize, std: f32| -> Vec<f32> {
            let mut rng = DetRng::derive(config.seed, tag);
            (0..count).map(|_| rng.normal_f32(std)).collect()
        };
        // Residual-path output projections are scaled down so depth does not
        // blow up the residual stream.
        let out_std = WEIGHT_STD / ((2 * config.num_layers) as f32).sqrt();

        let embed = EmbeddingTable::new(
            config.vocab_size,
            d,
            gauss(1, config.vocab_size * d, WEIGHT_STD),
        )?;
        let pos = gauss(2, config.max_context * d, WEIGHT_STD);
        let unembed = if config.tied_embeddings {
            None
        } else {
            Some(gauss(3, config.vocab_size * d, WEIGHT_STD))
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                let base = 16 + 8 * l as u64;
                LayerWeights {
                    attn_norm: vec![1.0; d],
                    wq: gauss(base, d * d, WEIGHT_STD),
                    wk: gauss(base + 1, d * d, WEIGHT_STD),
                    wv: gauss(base + 2, d * d, WEIGHT_STD),
                    wo: gauss(base + 3, d * d, out_std),
                    mlp_norm: vec![1.0; d],
                    fc1: gauss(base + 4, 4 * d * d, WEIGHT_STD),
                    fc2: gauss(base + 5, d * 4 * d, out_std),
                }
            })
            .collect();
        Ok(Decoder {
            config,
            embed,
            pos,
            layers,
            final_norm: vec![1.0; d],
            unembed,
        })
    }

    pub(crate) fn from_parts(
        config: ToyDecoderConfig,
        embed: EmbeddingTable,
        pos: Vec<f32>,
        layers: Vec<LayerWeights>,
        final_norm: Vec<f32>,
        unembed: Option<Vec<f32>>,
    ) -> Self {
        Decoder {
            config,
            embed,
            pos,
            layers,
            final_norm,
            unembed,
        }
    }

    pub fn config(&self) -> &ToyDecoderConfig {
        &self.config
    }

    /// The frozen token embedding matrix the memory module pools over.
    pub fn embedding_table(&self) -> &EmbeddingTable {
        &self.embed
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.config.num_layers, self.config.dim, self.config.max_context)
    }

    /// FNV-1a over every weight tensor; constant across any sequence of
    /// forward calls (the backbone is frozen).
    pub fn weights_fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut eat = |values: &[f32]| {
            for v in values {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x1000_0000_01b3);
                }
            }
        };
        eat(self.embed.raw());
        eat(&self.pos);
        for layer in &self.layers {
            eat(&layer.attn_norm);
            eat(&layer.wq);
            eat(&layer.wk);
            eat(&layer.wv);
            eat(&layer.wo);
            eat(&layer.mlp_norm);
            eat(&layer.fc1);
            eat(&layer.fc2);
        }
        eat(&self.final_norm);
        if let Some(u) = &self.unembed {
            eat(u);
        }
        h
    }

    /// Runs one decoder block over chunk rows `x` (in place), appending this
    /// layer's keys/values to the cache. `start` is the global position of
    /// the first chunk row.
    fn block_forward(
        &self,
        layer: usize,
        cache: &mut KvCache,
        x: &mut [f32],
        start: usize,
        scratch: &mut Scratch,
    ) {
        let d = self.config.dim;
        let heads = self.config.num_heads;
        let head_dim = d / heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let w = &self.layers[layer];
        let l_new = x.len() / d;

        for i in 0..l_new {
            let ctx = start + i + 1;
            let row = &mut x[i * d..(i + 1) * d];

            rmsnorm(row, &w.attn_norm, &mut scratch.normed);
            matvec(&w.wq, &scratch.normed, &mut scratch.q);
            matvec(&w.wk, &scratch.normed, &mut scratch.k);
            matvec(&w.wv, &scratch.normed, &mut scratch.v);
            cache.push_kv(layer, &scratch.k, &scratch.v);

            let keys = cache.keys(layer);
            let vals = cache.values(layer);
            scratch.attn.fill(0.0);
            for h in 0..heads {
                let off = h * head_dim;
                let qh = &scratch.q[off..off + head_dim];
                scratch.scores.clear();
                let mut max = f32::NEG_INFINITY;
                for j in 0..ctx {
                    let s = dot(qh, &keys[j * d + off..j * d + off + head_dim]) * scale;
                    scratch.scores.push(s);
                    if s > max {
                        max = s;
                    }
                }
                let mut denom = 0.0f32;
                for s in scratch.scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let inv = 1.0 / denom;
                let out_h = &mut scratch.attn[off..off + head_dim];
                for j in 0..ctx {
                    let p = scratch.scores[j] * inv;
                    for (o, vv) in out_h
                        .iter_mut()
                        .zip(vals[j * d + off..j * d + off + head_dim].iter())
                    {
                        *o += p * *vv;
                    }
                }
            }
            matvec(&w.wo, &scratch.attn, &mut scratch.proj);
            for (r, p) in row.iter_mut().zip(scratch.proj.iter()) {
                *r += *p;
            }

            rmsnorm(row, &w.mlp_norm, &mut scratch.normed);
            matvec(&w.fc1, &scratch.normed, &mut scratch.act);
            for a in scratch.act.iter_mut() {
                *a = silu(*a);
            }
            matvec(&w.fc2, &scratch.act, &mut scratch.proj);
            for (r, p) in row.iter_mut().zip(scratch.proj.iter()) {
                *r += *p;
            }
        }
    }

    fn final_logits(&self, x: &[f32], scratch: &mut Scratch) -> Logits {
        let d = self.config.dim;
        let vocab = self.config.vocab_size;
        let l_new = x.len() / d;
        let unembed: &[f32] = self.unembed.as_deref().unwrap_or_else(|| self.embed.raw());
        let mut values = vec![0.0f32; l_new * vocab];
        for i in 0..l_new {
            rmsnorm(&x[i * d..(i + 1) * d], &self.final_norm, &mut scratch.normed);
            let out = &mut values[i * vocab..(i + 1) * vocab];
            for (o, row) in out.iter_mut().zip(unembed.chunks_exact(d)) {
                *o = dot(&scratch.normed, row);
            }
        }
        Logits {
            rows: l_new,
            vocab,
            values,
        }
    }

    fn forward_chunk(
        &self,
        cache: &mut KvCache,
        full_prefix: &[TokenId],
        new_ids: &[TokenId],
        mut ngm: Option<&mut NgmRunner>,
        capture: bool,
    ) -> Result<(Logits, Option<LayerCapture>)> {
        let d = self.config.dim;
        let l_new = new_ids.len();
        if l_new == 0 {
            return Err(Error::EmptyInput("forward chunk has no tokens".into()));
        }
        if cache.num_layers() != self.config.num_layers || cache.dim() != d {
            return Err(Error::Cache(format!(
                "cache shape {}x{} does not match decoder {}x{}",
                cache.num_layers(),
                cache.dim(),
                self.config.num_layers,
                d
            )));
        }
        cache.ensure_room(l_new)?;
        let start = cache.len();
        if start + l_new != full_prefix.len() || &full_prefix[start..] != new_ids {
            return Err(Error::Cache(format!(
                "cache holds {start} positions but the prefix has {} with {} new ids",
                full_prefix.len(),
                l_new
            )));
        }

        // Token embeddings + learned absolute positions.
        let mut x = vec![0.0f32; l_new * d];
        let mut embed_rows = if capture { Some(vec![0.0f32; l_new * d]) } else { None };
        for (i, &id) in new_ids.iter().enumerate() {
            let e = self.embed.row(id)?;
            if let Some(buf) = embed_rows.as_mut() {
                buf[i * d..(i + 1) * d].copy_from_slice(e);
            }
            let p = &self.pos[(start + i) * d..(start + i + 1) * d];
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }

        // n-gram features over the full prefix, aligned to this chunk; built
        // once and shared by every hooked layer.
        let features = match ngm.as_deref_mut() {
            Some(runner) => runner.chunk_features(full_prefix, l_new, &self.embed)?,
            None => None,
        };

        let mut blocks = if capture { Some(Vec::with_capacity(self.config.num_layers)) } else { None };
        let mut scratch = Scratch::new(d);
        for l in 0..self.config.num_layers {
            self.block_forward(l, cache, &mut x, start, &mut scratch);
            if let Some(blocks) = blocks.as_mut() {
                blocks.push(HiddenStates::from_vec_unchecked(l, l_new, d, x.clone()));
            }
            if let (Some(runner), Some(stack)) = (ngm.as_deref_mut(), features.as_ref()) {
                if runner.plan().contains(l) {
                    let hidden = HiddenStates::from_vec_unchecked(l, l_new, d, x.clone());
                    let injected = runner.apply_layer(&hidden, stack)?;
                    x.copy_from_slice(injected.raw());
                }
            }
        }
        cache.advance(l_new);

        let logits = self.final_logits(&x, &mut scratch);
        let capture = embed_rows.map(|rows| LayerCapture {
            embedding: HiddenStates::from_vec_unchecked(0, l_new, d, rows),
            blocks: blocks.unwrap_or_default(),
        });
        Ok((logits, capture))
    }

    /// Single forward pass over a whole prompt. Returns per-position logits,
    /// the filled KV cache, and (optionally) per-layer hidden states.
    pub fn prefill(
        &self,
        ids: &[TokenId],
        ngm: Option<&mut NgmRunner>,
        capture: bool,
    ) -> Result<PrefillOutput> {
        let mut cache = self.empty_cache();
        let (logits, capture) = self.forward_chunk(&mut cache, ids, ids, ngm, capture)?;
        Ok(PrefillOutput {
            logits,
            cache,
            capture,
        })
    }

    /// Cached decode step: computes hidden states only for `new_ids`, while
    /// n-gram features are built from the full prefix and sliced to match.
    pub fn decode_step(
        &self,
        cache: &mut KvCache,
        new_ids: &[TokenId],
        full_prefix: &[TokenId],
        ngm: Option<&mut NgmRunner>,
    ) -> Result<Logits> {
        let (logits, _) = self.forward_chunk(cache, full_prefix, new_ids, ngm, false)?;
        Ok(logits)
    }

    /// Autoregressive generation; returns the newly generated ids.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        sampler_config: &SamplerConfig,
        mut ngm: Option<&mut NgmRunner>,
    ) -> Result<Vec<TokenId>> {
        if prompt.is_empty() {
            return Err(Error::EmptyInput("prompt must be nonempty".into()));
        }
        let mut sampler = Sampler::new(sampler_config.clone())?;
        let mut prefix = prompt.to_vec();
        let prefill = self.prefill(&prefix, ngm.as_deref_mut(), false)?;
        let mut cache = prefill.cache;
        let mut logits_row = prefill.logits.last().to_vec();

        let mut generated = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let next = sampler.sample(&logits_row);
            generated.push(next);
            prefix.push(next);
            if generated.len() == max_new || cache.len() >= self.config.max_context {
                break;
            }
            let logits = self.decode_step(&mut cache, &[next], &prefix, ngm.as_deref_mut())?;
            logits_row = logits.last().to_vec();
        }
        Ok(generated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NgmConfig;
    use crate::inject::ngm_forward;

    fn small_config(seed: u64) -> ToyDecoderConfig {
        ToyDecoderConfig {
            num_layers: 3,
            dim: 32,
            num_heads: 4,
            vocab_size: 64,
            max_context: 128,
            seed,
            tied_embeddings: true,
        }
    }

    fn prompt(len: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = DetRng::new(seed);
        (0..len).map(|_| rng.below(vocab as u64) as TokenId).collect()
    }

    fn ngm_config(layers: &[usize]) -> NgmConfig {
        NgmConfig {
            injection_layers: layers.iter().copied().collect(),
            ..NgmConfig::default()
        }
    }

    #[test]
    fn same_seed_same_weights_same_logits() {
        let a = Decoder::init(small_config(7)).unwrap();
        let b = Decoder::init(small_config(7)).unwrap();
        assert_eq!(a.weights_fingerprint(), b.weights_fingerprint());
        let ids = prompt(10, 64, 1);
        let la = a.prefill(&ids, None, false).unwrap().logits;
        let lb = b.prefill(&ids, None, false).unwrap().logits;
        assert_eq!(la.raw(), lb.raw());
        let c = Decoder::init(small_config(8)).unwrap();
        assert_ne!(a.weights_fingerprint(), c.weights_fingerprint());
    }

    #[test]
    fn tied_embeddings_share_the_table() {
        let tied = Decoder::init(small_config(3)).unwrap();
        assert!(tied.unembed.is_none());
        let untied = Decoder::init(ToyDecoderConfig {
            tied_embeddings: false,
            ..small_config(3)
        })
        .unwrap();
        assert!(untied.unembed.is_some());
        let ids = prompt(6, 64, 2);
        let lt = tied.prefill(&ids, None, false).unwrap().logits;
        let lu = untied.prefill(&ids, None, false).unwrap().logits;
        assert_ne!(lt.raw(), lu.raw());
    }

    /// Independent O(T^2) oracle: the whole forward pass re-done in f64 with
    /// explicit attention matrices instead of the cached per-row kernels.
    #[test]
    #[allow(clippy::needless_range_loop)]
    fn matches_naive_f64_attention_oracle() {
        let config = ToyDecoderConfig {
            num_layers: 2,
            dim: 32,
            num_heads: 4,
            vocab_size: 64,
            max_context: 64,
            seed: 11,
            tied_embeddings: true,
        };
        let decoder = Decoder::init(config.clone()).unwrap();
        let ids = prompt(12, 64, 3);
        let got = decoder.prefill(&ids, None, false).unwrap().logits;

        let d = config.dim;
        let t_len = ids.len();
        let to64 = |v: &[f32]| -> Vec<f64> { v.iter().map(|&x| x as f64).collect() };
        let matvec64 = |w: &[f64], x: &[f64]| -> Vec<f64> {
            w.chunks_exact(x.len())
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        };
        let rms64 = |x: &[f64]| -> Vec<f64> {
            let ms = x.iter().map(|a| a * a).sum::<f64>() / x.len() as f64;
            let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
            x.iter().map(|a| a * inv).collect()
        };

        let mut h: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let e = decoder.embed.row(ids[t]).unwrap();
                let p = &decoder.pos[t * d..(t + 1) * d];
                e.iter().zip(p).map(|(&a, &b)| a as f64 + b as f64).collect()
            })
            .collect();

        let heads = config.num_heads;
        let hd = d / heads;
        for layer in &decoder.layers {
            let wq = to64(&layer.wq);
            let wk = to64(&layer.wk);
            let wv = to64(&layer.wv);
            let wo = to64(&layer.wo);
            let fc1 = to64(&layer.fc1);
            let fc2 = to64(&layer.fc2);
            let qkv: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = h
                .iter()
                .map(|row| {
                    let n = rms64(row);
                    (matvec64(&wq, &n), matvec64(&wk, &n), matvec64(&wv, &n))
                })
                .collect();
            for t in 0..t_len {
                let mut attn = vec![0.0f64; d];
                for head in 0..heads {
                    let off = head * hd;
                    let q = &qkv[t].0[off..off + hd];
                    let scores: Vec<f64> = (0..=t)
                        .map(|j| {
                            let k = &qkv[j].1[off..off + hd];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()
                                / (hd as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..=t {
                        let v = &qkv[j].2[off..off + hd];
                        for (o, vv) in attn[off..off + hd].iter_mut().zip(v) {
                            *o += exps[j] / denom * vv;
                        }
                    }
                }
                let proj = matvec64(&wo, &attn);
                for j in 0..d {
                    h[t][j] += proj[j];
                }
                let n = rms64(&h[t]);
                let mut act = matvec64(&fc1, &n);
                for a in act.iter_mut() {
                    *a = *a / (1.0 + (-*a).exp());
                }
                let out = matvec64(&fc2, &act);
                for j in 0..d {
                    h[t][j] += out[j];
                }
            }
        }
        let embed64 = to64(decoder.embed.raw());
        for t in 0..t_len {
            let n = rms64(&h[t]);
            for v in 0..config.vocab_size {
                let expected: f64 = n.iter().zip(&embed64[v * d..(v + 1) * d]).map(|(a, b)| a * b).sum();
                let diff = (got.row(t)[v] as f64 - expected).abs();
                assert!(diff < 1e-4, "t={t} v={v} diff={diff}");
            }
        }
    }

    #[test]
    fn absent_ngm_equals_zero_scale_ngm() {
        let decoder = Decoder::init(small_config(5)).unwrap();
        let ids = prompt(16, 64, 4);
        let base = decoder.prefill(&ids, None, false).unwrap().logits;
        let mut config = ngm_config(&[0, 2]);
        config.output_scale = 0.0;
        let mut runner = NgmRunner::from_config(config, 3, FeatureMode::Recompute).unwrap();
        let with = decoder.prefill(&ids, Some(&mut runner), false).unwrap().logits;
        assert_eq!(base.raw(), with.raw());
        // The zero-scale runner still did the scoring work.
        assert!(runner.ngm_ops() > 0);
    }

    #[test]
    fn editing_a_later_token_leaves_earlier_logits_unchanged() {
        let decoder = Decoder::init(small_config(6)).unwrap();
        let mut ids = prompt(12, 64, 5);
        let mut runner =
            NgmRunner::from_config(ngm_config(&[1]), 3, FeatureMode::Recompute).unwrap();
        let a = decoder.prefill(&ids, Some(&mut runner), false).unwrap().logits;
        ids[8] = (ids[8] + 1) % 64;
        let mut runner2 =
            NgmRunner::from_config(ngm_config(&[1]), 3, FeatureMode::Recompute).unwrap();
        let b = decoder.prefill(&ids, Some(&mut runner2), false).unwrap().logits;
        for t in 0..8 {
            assert_eq!(a.row(t), b.row(t), "position {t}");
        }
        assert_ne!(a.row(8), b.row(8));
    }

    /// Oracle: drive the unhooked blocks one by one and apply the public
    /// end-to-end injector between layers; must equal the hooked prefill.
    #[test]
    fn hooked_prefill_matches_manual_layer_composition() {
        let decoder = Decoder::init(small_config(9)).unwrap();
        let ids = prompt(14, 64, 6);
        let config = ngm_config(&[1]);
        let mut runner = NgmRunner::from_config(config.clone(), 3, FeatureMode::Recompute).unwrap();
        let hooked = decoder.prefill(&ids, Some(&mut runner), false).unwrap().logits;

        let d = decoder.config.dim;
        let mut cache = decoder.empty_cache();
        let mut scratch = Scratch::new(d);
        let mut x = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let e = decoder.embed.row(id).unwrap();
            let p = &decoder.pos[i * d..(i + 1) * d];
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        for l in 0..3 {
            decoder.block_forward(l, &mut cache, &mut x, 0, &mut scratch);
            if l == 1 {
                let hidden = HiddenStates::from_vec_unchecked(l, ids.len(), d, x.clone());
                let injected = ngm_forward(&ids, &hidden, &decoder.embed, &config).unwrap();
                x.copy_from_slice(injected.raw());
            }
        }
        let manual = decoder.final_logits(&x, &mut scratch);
        assert_eq!(hooked.raw(), manual.raw());
    }

    #[test]
    fn cached_decode_reproduces_prefill_logits() {
        let decoder = Decoder::init(small_config(10)).unwrap();
        let ids = prompt(20, 64, 7);
        for hook_layers in [vec![], vec![1], vec![0, 2]] {
            let make = |mode: FeatureMode| {
                (!hook_layers.is_empty()).then(|| {
                    NgmRunner::from_config(ngm_config(&hook_layers), 3, mode).unwrap()
                })
            };
            let mut runner = make(FeatureMode::Streaming);
            let mut prefill_runner = make(FeatureMode::Recompute);
            let full = decoder
                .prefill(&ids, prefill_runner.as_mut(), false)
                .unwrap()
                .logits;

            let mut cache = decoder.empty_cache();
            for t in 0..ids.len() {
                let logits = decoder
                    .decode_step(&mut cache, &[ids[t]], &ids[..=t], runner.as_mut())
                    .unwrap();
                for (a, b) in logits.row(0).iter().zip(full.row(t)) {
                    assert!((a - b).abs() <= 1e-5, "t={t}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn greedy_cached_decode_equals_recompute_decode() {
        let decoder = Decoder::init(small_config(12)).unwrap();
        let start = prompt(5, 64, 8);

        // Cached loop.
        let mut cached_ids = start.clone();
        let mut cache = decoder.empty_cache();
        let mut logits = decoder
            .prefill(&cached_ids, None, false)
            .unwrap()
            .logits
            .last()
            .to_vec();
        let mut cached_out = Vec::new();
        for _ in 0..32 {
            let next = argmax(&logits);
            cached_out.push(next);
            cached_ids.push(next);
            let new_from = cache.len();
            let l = decoder
                .decode_step(&mut cache, &cached_ids[new_from..], &cached_ids, None)
                .unwrap();
            logits = l.last().to_vec();
        }

        // Full recompute each step.
        let mut recompute_ids = start;
        let mut recompute_out = Vec::new();
        for _ in 0..32 {
            let l = decoder.prefill(&recompute_ids, None, false).unwrap().logits;
            let next = argmax(l.last());
            recompute_out.push(next);
            recompute_ids.push(next);
        }
        assert_eq!(cached_out, recompute_out);
    }

    #[test]
    fn single_step_with_ngm_matches_full_prefill_row() {
        let decoder = Decoder::init(small_config(13)).unwrap();
        let ids = prompt(18, 64, 9);
        let config = ngm_config(&[0, 2]);

        let mut full_runner =
            NgmRunner::from_config(config.clone(), 3, FeatureMode::Recompute).unwrap();
        let full = decoder
            .prefill(&ids, Some(&mut full_runner), false)
            .unwrap()
            .logits;

        let mut step_runner =
            NgmRunner::from_config(config, 3, FeatureMode::Streaming).unwrap();
        let mut cache = decoder.empty_cache();
        let mut last = None;
        for t in 0..ids.len() {
            let logits = decoder
                .decode_step(&mut cache, &[ids[t]], &ids[..=t], Some(&mut step_runner))
                .unwrap();
            last = Some(logits.row(0).to_vec());
        }
        for (a, b) in last.unwrap().iter().zip(full.last()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn empty_hook_plan_reproduces_the_plain_decoder() {
        let decoder = Decoder::init(small_config(11)).unwrap();
        let ids = prompt(12, 64, 18);
        let plain = decoder.prefill(&ids, None, false).unwrap().logits;
        let config = NgmConfig {
            injection_layers: [].into(),
            ..NgmConfig::default()
        };
        let mut runner = NgmRunner::new(
            config,
            crate::decoder::HookPlan::empty(),
            FeatureMode::Streaming,
        )
        .unwrap();
        let hooked = decoder.prefill(&ids, Some(&mut runner), false).unwrap().logits;
        assert_eq!(plain.raw(), hooked.raw());
        assert_eq!(runner.ngm_ops(), 0);
    }

    #[test]
    fn chunked_decode_matches_full_prefill() {
        let decoder = Decoder::init(small_config(22)).unwrap();
        let ids = prompt(16, 64, 19);
        let config = ngm_config(&[0, 2]);
        let mut full_runner =
            NgmRunner::from_config(config.clone(), 3, FeatureMode::Recompute).unwrap();
        let full = decoder
            .prefill(&ids, Some(&mut full_runner), false)
            .unwrap()
            .logits;

        // Prefill the first half, then feed the rest as one multi-token
        // chunk: its features are the sliced tail of the full-prefix stack.
        let mut runner = NgmRunner::from_config(config, 3, FeatureMode::Recompute).unwrap();
        let half = 9;
        let mut cache = decoder.empty_cache();
        decoder
            .decode_step(&mut cache, &ids[..half], &ids[..half], Some(&mut runner))
            .unwrap();
        let tail = decoder
            .decode_step(&mut cache, &ids[half..], &ids, Some(&mut runner))
            .unwrap();
        assert_eq!(tail.rows(), ids.len() - half);
        for (i, t) in (half..ids.len()).enumerate() {
            assert_eq!(tail.row(i), full.row(t), "position {t}");
        }
    }

    #[test]
    fn cache_prefix_mismatch_is_rejected() {
        let decoder = Decoder::init(small_config(14)).unwrap();
        let ids = prompt(6, 64, 10);
        let mut cache = decoder.empty_cache();
        decoder.decode_step(&mut cache, &ids[..3], &ids[..3], None).unwrap();
        // Wrong suffix.
        let err = decoder
            .decode_step(&mut cache, &[ids[4]], &ids[..4], None)
            .unwrap_err();
        assert!(matches!(err, Error::Cache(_)));
        // Wrong length.
        let err = decoder
            .decode_step(&mut cache, &[ids[3]], &ids[..6], None)
            .unwrap_err();
        assert!(matches!(err, Error::Cache(_)));
    }

    #[test]
    fn context_overflow_is_rejected() {
        let config = ToyDecoderConfig {
            max_context: 8,
            ..small_config(15)
        };
        let decoder = Decoder::init(config).unwrap();
        let ids = prompt(9, 64, 11);
        assert!(matches!(
            decoder.prefill(&ids, None, false),
            Err(Error::Context(_))
        ));
    }

    #[test]
    fn generation_is_reproducible_under_a_fixed_seed() {
        let decoder = Decoder::init(small_config(16)).unwrap();
        let p = prompt(4, 64, 12);
        let sampler = SamplerConfig {
            seed: 99,
            ..SamplerConfig::default()
        };
        let a = decoder.generate(&p, 24, &sampler, None).unwrap();
        let b = decoder.generate(&p, 24, &sampler, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 24);
    }

    #[test]
    fn ngm_off_equals_zero_scale_generation() {
        let decoder = Decoder::init(small_config(17)).unwrap();
        let p = prompt(4, 64, 13);
        let sampler = SamplerConfig::greedy();
        let off = decoder.generate(&p, 16, &sampler, None).unwrap();
        let mut config = ngm_config(&[1]);
        config.output_scale = 0.0;
        let mut runner = NgmRunner::from_config(config, 3, FeatureMode::Streaming).unwrap();
        let on = decoder.generate(&p, 16, &sampler, Some(&mut runner)).unwrap();
        assert_eq!(off, on);
    }

    #[test]
    fn first_divergence_is_where_injection_flips_the_argmax() {
        let decoder = Decoder::init(small_config(18)).unwrap();
        let p = prompt(6, 64, 14);
        let sampler = SamplerConfig::greedy();
        let config = ngm_config(&[0, 1, 2]);

        let base = decoder.generate(&p, 24, &sampler, None).unwrap();
        let mut runner =
            NgmRunner::from_config(config.clone(), 3, FeatureMode::Streaming).unwrap();
        let injected = decoder.generate(&p, 24, &sampler, Some(&mut runner)).unwrap();

        if let Some(k) = (0..24).find(|&k| base[k] != injected[k]) {
            // Replay the shared prefix up to the divergence step and check
            // the two argmaxes disagree exactly there.
            let mut prefix = p.clone();
            prefix.extend_from_slice(&base[..k]);
            let base_logits = decoder.prefill(&prefix, None, false).unwrap().logits;
            let mut replay_runner =
                NgmRunner::from_config(config, 3, FeatureMode::Recompute).unwrap();
            let inj_logits = decoder
                .prefill(&prefix, Some(&mut replay_runner), false)
                .unwrap()
                .logits;
            assert_eq!(argmax(base_logits.last()), base[k]);
            assert_eq!(argmax(inj_logits.last()), injected[k]);
            assert_ne!(base[k], injected[k]);
        }
    }

    #[test]
    fn weights_stay_frozen_across_calls() {
        let decoder = Decoder::init(small_config(19)).unwrap();
        let before = decoder.weights_fingerprint();
        let p = prompt(8, 64, 15);
        let mut runner =
            NgmRunner::from_config(ngm_config(&[1]), 3, FeatureMode::Streaming).unwrap();
        decoder.prefill(&p, None, true).unwrap();
        decoder.generate(&p, 12, &SamplerConfig::greedy(), Some(&mut runner)).unwrap();
        assert_eq!(decoder.weights_fingerprint(), before);
    }

    #[test]
    fn injection_only_affects_layers_at_or_after_the_hook() {
        let decoder = Decoder::init(small_config(20)).unwrap();
        let ids = prompt(10, 64, 16);
        let base = decoder.prefill(&ids, None, true).unwrap().capture.unwrap();
        let mut runner =
            NgmRunner::from_config(ngm_config(&[2]), 3, FeatureMode::Recompute).unwrap();
        let hooked = decoder
            .prefill(&ids, Some(&mut runner), true)
            .unwrap()
            .capture
            .unwrap();
        assert_eq!(base.embedding.raw(), hooked.embedding.raw());
        for l in 0..2 {
            assert_eq!(base.blocks[l].raw(), hooked.blocks[l].raw(), "layer {l}");
        }
        // Captures are pre-injection at the hooked layer itself.
        assert_eq!(base.blocks[2].raw(), hooked.blocks[2].raw());
        // But downstream logits differ.
        let base_logits = decoder.prefill(&ids, None, false).unwrap().logits;
        let mut runner2 =
            NgmRunner::from_config(ngm_config(&[2]), 3, FeatureMode::Recompute).unwrap();
        let hooked_logits = decoder
            .prefill(&ids, Some(&mut runner2), false)
            .unwrap()
            .logits;
        assert_ne!(base_logits.raw(), hooked_logits.raw());
    }

    #[test]
    fn capture_has_embedding_plus_one_entry_per_layer() {
        let decoder = Decoder::init(small_config(21)).unwrap();
        let ids = prompt(7, 64, 17);
        let capture = decoder.prefill(&ids, None, true).unwrap().capture.unwrap();
        assert_eq!(capture.blocks.len(), 3);
        assert_eq!(capture.embedding.rows(), 7);
        for (l, block) in capture.blocks.iter().enumerate() {
            assert_eq!(block.layer_index(), l);
            assert_eq!(block.rows(), 7);
        }
        // Embedding capture excludes position vectors.
        for (t, &id) in ids.iter().enumerate() {
            assert_eq!(capture.embedding.row(t), decoder.embed.row(id).unwrap());
        }
    }
}
