//! Training-free n-gram memory for frozen decoders.
//!
//! The mechanism has two halves. A causal n-gram encoder averages the
//! backbone's own token embeddings over trailing windows of a few sizes,
//! producing per-position local-pattern vectors without any learned state
//! ([`ngram`]). A cosine-gated injector scores those vectors against a
//! layer's hidden states and writes the positively aligned ones back into
//! the residual stream, scaled by a fixed constant ([`inject`]).
//!
//! Around the mechanism this crate carries a deterministic frozen toy
//! decoder with KV-cached generation and per-layer hooks ([`decoder`]), a
//! mechanistic-analysis suite for alignment and cross-position locality
//! ([`analysis`]), a latency / operation-count benchmark harness
//! ([`bench`]), and the file formats used by the CLI ([`io`]).

pub mod analysis;
pub mod bench;
pub mod config;
pub mod decoder;
pub mod error;
pub mod inject;
pub mod io;
pub mod ngram;
pub mod rng;

pub use config::{Fusion, NgmConfig};
pub use decoder::{
    argmax, Decoder, FeatureMode, HookPlan, KvCache, Logits, NgmRunner, Sampler, SamplerConfig,
    SamplerKind, ToyDecoderConfig,
};
pub use error::{Error, Result};
pub use inject::{
    cosine_scores, inject_concat, inject_stack, memory_update, ngm_forward, relu_gate, GateScores,
    HiddenStates, MemoryUpdate, ZERO_NORM_EPS,
};
pub use ngram::{
    apply_compressed_map, build_compressed_map, encode_causal_ngrams, slice_last,
    CompressedTokenMap, EmbeddingTable, NgramStack, StreamingNgramState, TokenId,
};
