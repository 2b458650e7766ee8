//! Per-layer key/value cache for autoregressive decoding.

use crate::error::{Error, Result};

/// Keys and values for every processed position, per layer. Length grows by
/// exactly the number of new positions each decode step.
#[derive(Debug, Clone)]
pub struct KvCache {
    dim: usize,
    max_context: usize,
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(num_layers: usize, dim: usize, max_context: usize) -> Self {
        KvCache {
            dim,
            max_context,
            k: vec![Vec::new(); num_layers],
            v: vec![Vec::new(); num_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.k.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    pub(crate) fn ensure_room(&self, new_positions: usize) -> Result<()> {
        if self.len + new_positions > self.max_context {
            return Err(Error::Context(format!(
                "{} cached + {} new positions exceeds max context {}",
                self.len, new_positions, self.max_context
            )));
        }
        Ok(())
    }

    pub(crate) fn push_kv(&mut self, layer: usize, k_row: &[f32], v_row: &[f32]) {
        debug_assert_eq!(k_row.len(), self.dim);
        self.k[layer].extend_from_slice(k_row);
        self.v[layer].extend_from_slice(v_row);
    }

    /// All cached keys for `layer`, flat `positions * dim`.
    pub(crate) fn keys(&self, layer: usize) -> &[f32] {
        &self.k[layer]
    }

    pub(crate) fn values(&self, layer: usize) -> &[f32] {
        &self.v[layer]
    }

    /// Commits a fully processed chunk. Every layer must have received
    /// exactly the same number of rows.
    pub(crate) fn advance(&mut self, new_positions: usize) {
        self.len += new_positions;
        debug_assert!(self
            .k
            .iter()
            .zip(&self.v)
            .all(|(k, v)| k.len() == self.len * self.dim && v.len() == self.len * self.dim));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grows_by_exactly_the_new_positions() {
        let mut cache = KvCache::new(2, 4, 8);
        for layer in 0..2 {
            cache.push_kv(layer, &[1.0; 4], &[2.0; 4]);
        }
        cache.advance(1);
        assert_eq!(cache.len(), 1);
        for layer in 0..2 {
            cache.push_kv(layer, &[0.0; 4], &[0.0; 4]);
            cache.push_kv(layer, &[0.0; 4], &[0.0; 4]);
        }
        cache.advance(2);
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn room_check_respects_max_context() {
        let cache = KvCache::new(1, 2, 4);
        assert!(cache.ensure_room(4).is_ok());
        assert!(matches!(cache.ensure_room(5), Err(Error::Context(_))));
    }
}
