//! Compressed-token pre-pass: token ids whose normalized surface forms
//! coincide are remapped onto one shared id before embedding lookup. The
//! remap only ever feeds n-gram construction, never the backbone input.
//!
//! Normalization strips at most one leading word-boundary marker (defaults
//! to U+2581 "lower one eighth block", the usual sentencepiece marker, and
//! can be overridden by the vocab file header) and lowercases the rest.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TokenId;

/// Default word-boundary marker stripped during normalization.
pub const DEFAULT_MARKER: char = '\u{2581}';

/// Total idempotent map from token id to canonical token id. Ids outside the
/// stored domain map to themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedTokenMap {
    mapping: BTreeMap<TokenId, TokenId>,
}

impl CompressedTokenMap {
    pub fn identity() -> Self {
        CompressedTokenMap::default()
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Number of ids that are actually remapped.
    pub fn remapped_count(&self) -> usize {
        self.mapping.len()
    }

    #[inline]
    pub fn map(&self, id: TokenId) -> TokenId {
        self.mapping.get(&id).copied().unwrap_or(id)
    }

    pub fn entries(&self) -> impl Iterator<Item = (TokenId, TokenId)> + '_ {
        self.mapping.iter().map(|(&k, &v)| (k, v))
    }
}

fn normalize_surface(surface: &str, marker: char) -> String {
    let stripped = surface.strip_prefix(marker).unwrap_or(surface);
    stripped.to_lowercase()
}

/// Groups `vocab` entries by normalized surface form; every token maps to
/// the lowest id in its equivalence class. Duplicate ids are rejected.
pub fn build_compressed_map(
    vocab: &[(TokenId, String)],
    marker: Option<char>,
) -> Result<CompressedTokenMap> {
    let marker = marker.unwrap_or(DEFAULT_MARKER);
    let mut canonical: HashMap<String, TokenId> = HashMap::with_capacity(vocab.len());
    let mut seen: HashMap<TokenId, ()> = HashMap::with_capacity(vocab.len());
    // First pass: lowest id per normalized form. Two passes keep the result
    // independent of the vocab ordering.
    for (id, surface) in vocab {
        if seen.insert(*id, ()).is_some() {
            return Err(Error::InvalidVocab(format!("duplicate token id {id}")));
        }
        let key = normalize_surface(surface, marker);
        canonical
            .entry(key)
            .and_modify(|c| *c = (*c).min(*id))
            .or_insert(*id);
    }
    let mut mapping = BTreeMap::new();
    for (id, surface) in vocab {
        let target = canonical[&normalize_surface(surface, marker)];
        if target != *id {
            mapping.insert(*id, target);
        }
    }
    Ok(CompressedTokenMap { mapping })
}

/// Elementwise remap; length is preserved.
pub fn apply_compressed_map(ids: &[TokenId], map: &CompressedTokenMap) -> Vec<TokenId> {
    ids.iter().map(|&id| map.map(id)).collect()
}

/// Vocab entries plus the marker char from the optional header.
pub type ParsedVocab = (Vec<(TokenId, String)>, Option<char>);

/// Parses a vocab file: one `id<TAB>surface` per line, optionally preceded
/// by a `#marker=<char>` header selecting the boundary marker.
pub fn parse_vocab(text: &str) -> Result<ParsedVocab> {
    let mut marker = None;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if let Some(rest) = line.strip_prefix("#marker=") {
                let mut chars = rest.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => {
                        marker = Some(c);
                        continue;
                    }
                    _ => {
                        return Err(Error::Format(format!(
                            "vocab header must name exactly one marker char, got {rest:?}"
                        )))
                    }
                }
            }
        }
        if line.is_empty() {
            continue;
        }
        let (id_str, surface) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("vocab line {} lacks a tab separator", lineno + 1))
        })?;
        let id: TokenId = id_str.parse().map_err(|_| {
            Error::Format(format!("vocab line {}: bad token id {id_str:?}", lineno + 1))
        })?;
        entries.push((id, surface.to_string()));
    }
    Ok((entries, marker))
}
