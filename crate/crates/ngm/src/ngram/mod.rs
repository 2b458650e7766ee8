//! Causal multi-scale n-gram encoding over a frozen embedding table.
//!
//! For every position `t` and window size `n`, the encoder averages the
//! embeddings of the trailing `n` tokens, with the sequence conceptually
//! left-padded by `n - 1` zero vectors so the output keeps the input length
//! and position `t` never sees a token beyond `t`. Masked-out positions
//! (e.g. non-text tokens) contribute a zero vector to every window they fall
//! in; the divisor stays `n` either way, matching the zero-pad semantics.
//!
//! Pooling runs in f32 with left-to-right summation. The streaming variant
//! ([`StreamingNgramState`]) replays the exact same summation over a ring
//! buffer of recent embeddings, so batch and streaming outputs are
//! bit-identical.

mod comptok;
mod streaming;

pub use comptok::{apply_compressed_map, build_compressed_map, parse_vocab, CompressedTokenMap, DEFAULT_MARKER};
pub use streaming::StreamingNgramState;

use crate::error::{Error, Result};

/// Token id. Sequences arrive pre-tokenized.
pub type TokenId = u32;

/// Frozen V x d embedding matrix standing in for a backbone's token
/// embeddings. All entries are guaranteed finite after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vocab_size: usize,
    dim: usize,
    rows: Vec<f32>,
}

impl EmbeddingTable {
    /// Builds a table from row-major data. Rejects empty shapes, size
    /// mismatches, and non-finite entries.
    pub fn new(vocab_size: usize, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::CorruptTable(format!(
                "embedding table must have positive shape, got {vocab_size}x{dim}"
            )));
        }
        if rows.len() != vocab_size * dim {
            return Err(Error::CorruptTable(format!(
                "expected {} values for a {vocab_size}x{dim} table, got {}",
                vocab_size * dim,
                rows.len()
            )));
        }
        if let Some(idx) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::CorruptTable(format!(
                "non-finite value at row {}, column {}",
                idx / dim,
                idx % dim
            )));
        }
        Ok(EmbeddingTable {
            vocab_size,
            dim,
            rows,
        })
    }

    /// Gaussian table for tests and demos, deterministic in the seed.
    pub fn random(vocab_size: usize, dim: usize, std: f32, seed: u64) -> Self {
        let mut rng = crate::rng::DetRng::derive(seed, 0x7ab1e);
        let rows = (0..vocab_size * dim).map(|_| rng.normal_f32(std)).collect();
        EmbeddingTable::new(vocab_size, dim, rows).expect("finite gaussian rows")
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: TokenId) -> Result<&[f32]> {
        let idx = id as usize;
        if idx >= self.vocab_size {
            return Err(Error::InvalidToken {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(&self.rows[idx * self.dim..(idx + 1) * self.dim])
    }

    pub fn raw(&self) -> &[f32] {
        &self.rows
    }
}

/// Per-position, per-scale pooled embeddings: a T x |sizes| x d tensor in
/// row-major order together with the window sizes labelling axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramStack {
    len: usize,
    sizes: Vec<usize>,
    dim: usize,
    values: Vec<f32>,
}

impl NgramStack {
    pub fn empty(sizes: Vec<usize>, dim: usize) -> Self {
        NgramStack {
            len: 0,
            sizes,
            dim,
            values: Vec::new(),
        }
    }

    pub fn from_values(len: usize, sizes: Vec<usize>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != len * sizes.len() * dim {
            return Err(Error::Shape(format!(
                "expected {} values for a {len}x{}x{dim} stack, got {}",
                len * sizes.len() * dim,
                sizes.len(),
                values.len()
            )));
        }
        Ok(NgramStack {
            len,
            sizes,
            dim,
            values,
        })
    }

    /// Number of positions (T).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_scales(&self) -> usize {
        self.sizes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pooled vector for position `t` and scale index `scale` (indexing into
    /// `sizes`, not the window length itself).
    pub fn vector(&self, t: usize, scale: usize) -> &[f32] {
        let s = self.num_scales();
        let start = (t * s + scale) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// All scales for position `t`, scale-major.
    pub fn position(&self, t: usize) -> &[f32] {
        let s = self.num_scales();
        let start = t * s * self.dim;
        &self.values[start..start + s * self.dim]
    }

    pub fn raw(&self) -> &[f32] {
        &self.values
    }

    /// Appends one position worth of pooled vectors (scale-major, |sizes|*d).
    pub fn push_position(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.num_scales() * self.dim {
            return Err(Error::Shape(format!(
                "position row has {} values, expected {}",
                row.len(),
                self.num_scales() * self.dim
            )));
        }
        self.values.extend_from_slice(row);
        self.len += 1;
        Ok(())
    }

    /// Rows for the last `last` positions, unchanged. Aligns n-gram features
    /// with the hidden states actually computed under KV caching.
    pub fn slice_last(&self, last: usize) -> Result<NgramStack> {
        if last == 0 || last > self.len {
            return Err(Error::InvalidSlice {
                requested: last,
                len: self.len,
            });
        }
        let s = self.num_scales();
        let start = (self.len - last) * s * self.dim;
        Ok(NgramStack {
            len: last,
            sizes: self.sizes.clone(),
            dim: self.dim,
            values: self.values[start..].to_vec(),
        })
    }
}

/// See [`NgramStack::slice_last`].
pub fn slice_last(stack: &NgramStack, last: usize) -> Result<NgramStack> {
    stack.slice_last(last)
}

pub(crate) fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("n-gram sizes must be nonempty".into()));
    }
    for w in sizes.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "n-gram sizes must be strictly increasing, got {sizes:?}"
            )));
        }
    }
    if sizes[0] < 1 {
        return Err(Error::Config("n-gram sizes must be >= 1".into()));
    }
    Ok(())
}

/// Zeroes `acc` and sums `rows` into it left-to-right. Both the batch and
/// streaming encoders funnel through this kernel so their window sums agree
/// bit-for-bit. Returns the number of f32 additions performed.
#[inline]
pub(crate) fn sum_rows_into(acc: &mut [f32], rows: &[&[f32]]) -> u64 {
    acc.fill(0.0);
    for row in rows {
        for (a, x) in acc.iter_mut().zip(row.iter()) {
            *a += *x;
        }
    }
    rows.len() as u64 * acc.len() as u64
}

/// Causal multi-scale n-gram encoding of `ids`.
///
/// Output row `t`, scale `i` is the mean over the trailing `sizes[i]`-token
/// window, where positions before the sequence start and positions with
/// `mask == false` contribute zero vectors. The output always has exactly
/// `ids.len()` positions; an empty input yields an empty stack.
pub fn encode_causal_ngrams(
    ids: &[TokenId],
    table: &EmbeddingTable,
    sizes: &[usize],
    mask: Option<&[bool]>,
) -> Result<NgramStack> {
    let mut ops = 0u64;
    encode_causal_ngrams_counted(ids, table, sizes, mask, &mut ops)
}

/// [`encode_causal_ngrams`] that also accumulates the number of f32
/// arithmetic operations into `ops` (used by the benchmark harness).
pub fn encode_causal_ngrams_counted(
    ids: &[TokenId],
    table: &EmbeddingTable,
    sizes: &[usize],
    mask: Option<&[bool]>,
    ops: &mut u64,
) -> Result<NgramStack> {
    validate_sizes(sizes)?;
    if let Some(m) = mask {
        if m.len() != ids.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} tokens",
                m.len(),
                ids.len()
            )));
        }
    }
    let dim = table.dim();
    // Resolve every id up front so a bad token fails before any pooling.
    let mut embeds: Vec<&[f32]> = Vec::with_capacity(ids.len());
    for &id in ids {
        embeds.push(table.row(id)?);
    }

    let num_scales = sizes.len();
    let mut values = vec![0.0f32; ids.len() * num_scales * dim];
    let mut window: Vec<&[f32]> = Vec::with_capacity(sizes.last().copied().unwrap_or(0));
    for t in 0..ids.len() {
        for (i, &n) in sizes.iter().enumerate() {
            window.clear();
            let start = (t + 1).saturating_sub(n);
            for k in start..=t {
                if mask.is_none_or(|m| m[k]) {
                    window.push(embeds[k]);
                }
            }
            let out = &mut values[(t * num_scales + i) * dim..(t * num_scales + i + 1) * dim];
            *ops += sum_rows_into(out, &window);
            let nf = n as f32;
            for a in out.iter_mut() {
                *a /= nf;
            }
            *ops += dim as u64;
        }
    }
    NgramStack::from_values(ids.len(), sizes.to_vec(), dim, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table(vocab: usize, dim: usize, seed: u64) -> EmbeddingTable {
        EmbeddingTable::random(vocab, dim, 0.5, seed)
    }

    /// Independent oracle: materialize the zero-padded (and masked)
    /// embedding sequence, then sum each window directly, left to right.
    fn oracle_encode(
        ids: &[TokenId],
        table: &EmbeddingTable,
        sizes: &[usize],
        mask: Option<&[bool]>,
    ) -> Vec<f32> {
        let d = table.dim();
        let t_len = ids.len();
        let mut out = Vec::with_capacity(t_len * sizes.len() * d);
        for t in 0..t_len {
            for &n in sizes {
                // Padded sequence: index p in [t+1-n, t], zero vector when
                // p < 0 or the position is masked out.
                let mut acc = vec![0.0f32; d];
                for offset in 0..n {
                    let p = t as i64 - (n - 1 - offset) as i64;
                    if p < 0 {
                        continue; // zero pad: adds nothing
                    }
                    let p = p as usize;
                    if mask.is_some_and(|m| !m[p]) {
                        continue; // masked: zero vector
                    }
                    let row = table.row(ids[p]).unwrap();
                    for j in 0..d {
                        acc[j] += row[j];
                    }
                }
                for a in &mut acc {
                    *a /= n as f32;
                }
                out.extend_from_slice(&acc);
            }
        }
        out
    }

    #[test]
    fn unigram_is_the_embedding_itself() {
        let table = toy_table(16, 8, 1);
        let ids = [3u32, 7, 0, 15];
        let stack = encode_causal_ngrams(&ids, &table, &[1], None).unwrap();
        for (t, &id) in ids.iter().enumerate() {
            assert_eq!(stack.vector(t, 0), table.row(id).unwrap());
        }
    }

    #[test]
    fn single_token_bigram_is_half_the_embedding() {
        let table = toy_table(8, 4, 2);
        let stack = encode_causal_ngrams(&[5], &table, &[2], None).unwrap();
        let row = table.row(5).unwrap();
        for (got, e) in stack.vector(0, 0).iter().zip(row) {
            assert_eq!(*got, e / 2.0);
        }
    }

    #[test]
    fn matches_direct_summation_oracle_bitwise() {
        let table = toy_table(32, 3, 3);
        let ids = [4u32, 19, 2, 2, 30];
        let stack = encode_causal_ngrams(&ids, &table, &[2, 3], None).unwrap();
        let expected = oracle_encode(&ids, &table, &[2, 3], None);
        assert_eq!(stack.raw().len(), expected.len());
        for (a, b) in stack.raw().iter().zip(&expected) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn constant_ids_saturated_window_equals_the_embedding() {
        let table = toy_table(8, 6, 4);
        let ids = [6u32; 10];
        let stack = encode_causal_ngrams(&ids, &table, &[3], None).unwrap();
        let row = table.row(6).unwrap();
        for t in 2..10 {
            for (got, e) in stack.vector(t, 0).iter().zip(row) {
                assert!(
                    (got - e).abs() <= 1e-6 * e.abs().max(1.0),
                    "t={t}: {got} vs {e}"
                );
            }
        }
    }

    #[test]
    fn masked_positions_contribute_zero_but_divisor_stays_n() {
        let table = toy_table(8, 4, 5);
        let ids = [1u32, 2, 3];
        let mask = [true, false, true];
        let stack = encode_causal_ngrams(&ids, &table, &[2], Some(&mask)).unwrap();
        // Position 1 is masked: its window keeps only position 0's token.
        let e = table.row(1).unwrap();
        for (got, x) in stack.vector(1, 0).iter().zip(e) {
            assert_eq!(*got, x / 2.0);
        }
        // Position 2's window covers the masked position 1 and itself, so
        // only its own token survives.
        let e3 = table.row(3).unwrap();
        for (got, x) in stack.vector(2, 0).iter().zip(e3) {
            assert_eq!(*got, x / 2.0);
        }
        // Oracle agreement under masks.
        let expected = oracle_encode(&ids, &table, &[2], Some(&mask));
        assert_eq!(stack.raw(), &expected[..]);
    }

    #[test]
    fn empty_input_yields_empty_stack() {
        let table = toy_table(4, 4, 6);
        let stack = encode_causal_ngrams(&[], &table, &[2, 3], None).unwrap();
        assert_eq!(stack.len(), 0);
        assert!(stack.is_empty());
    }

    #[test]
    fn window_longer_than_sequence_is_legal() {
        let table = toy_table(4, 4, 7);
        let stack = encode_causal_ngrams(&[1, 2], &table, &[5], None).unwrap();
        assert_eq!(stack.len(), 2);
        let e1 = table.row(1).unwrap();
        let e2 = table.row(2).unwrap();
        for j in 0..4 {
            assert_eq!(stack.vector(0, 0)[j], e1[j] / 5.0);
            assert_eq!(stack.vector(1, 0)[j], (e1[j] + e2[j]) / 5.0);
        }
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let table = toy_table(4, 4, 8);
        let err = encode_causal_ngrams(&[9], &table, &[1], None).unwrap_err();
        assert!(matches!(err, Error::InvalidToken { id: 9, vocab: 4 }));
    }

    #[test]
    fn bad_mask_length_is_rejected() {
        let table = toy_table(4, 4, 8);
        let err = encode_causal_ngrams(&[1, 2], &table, &[1], Some(&[true])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn invalid_sizes_rejected() {
        let table = toy_table(4, 4, 8);
        assert!(encode_causal_ngrams(&[1], &table, &[], None).is_err());
        assert!(encode_causal_ngrams(&[1], &table, &[2, 2], None).is_err());
        assert!(encode_causal_ngrams(&[1], &table, &[3, 2], None).is_err());
    }

    #[test]
    fn non_finite_table_is_rejected_at_construction() {
        let err = EmbeddingTable::new(2, 2, vec![0.0, 1.0, f32::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, Error::CorruptTable(_)));
    }

    #[test]
    fn slice_last_full_and_single() {
        let table = toy_table(16, 4, 9);
        let ids = [1u32, 2, 3, 4, 5];
        let stack = encode_causal_ngrams(&ids, &table, &[2], None).unwrap();
        let full = stack.slice_last(5).unwrap();
        assert_eq!(full, stack);
        let last = stack.slice_last(1).unwrap();
        assert_eq!(last.len(), 1);
        assert_eq!(last.vector(0, 0), stack.vector(4, 0));
    }

    #[test]
    fn slice_last_rejects_bad_lengths() {
        let table = toy_table(16, 4, 10);
        let stack = encode_causal_ngrams(&[1, 2], &table, &[2], None).unwrap();
        assert!(matches!(
            stack.slice_last(3),
            Err(Error::InvalidSlice { requested: 3, len: 2 })
        ));
        assert!(stack.slice_last(0).is_err());
    }

    #[test]
    fn op_count_scales_linearly_with_length() {
        let table = toy_table(16, 8, 11);
        let mut ops_a = 0u64;
        let mut ops_b = 0u64;
        let ids_a: Vec<u32> = (0..64).map(|i| (i % 16) as u32).collect();
        let ids_b: Vec<u32> = (0..128).map(|i| (i % 16) as u32).collect();
        encode_causal_ngrams_counted(&ids_a, &table, &[2, 3], None, &mut ops_a).unwrap();
        encode_causal_ngrams_counted(&ids_b, &table, &[2, 3], None, &mut ops_b).unwrap();
        // Doubling T should roughly double the work (edge windows aside).
        let ratio = ops_b as f64 / ops_a as f64;
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_instance() -> impl Strategy<Value = (u64, Vec<u32>, Vec<usize>)> {
            (
                any::<u64>(),
                proptest::collection::vec(0u32..32, 0..48),
                proptest::sample::subsequence(vec![1usize, 2, 3, 4, 5, 6, 7, 8], 1..4),
            )
        }

        proptest! {
            #[test]
            fn causality((seed, ids, sizes) in arb_instance(), extra in proptest::collection::vec(0u32..32, 1..8)) {
                let table = toy_table(32, 6, seed);
                let base = encode_causal_ngrams(&ids, &table, &sizes, None).unwrap();
                let mut longer = ids.clone();
                longer.extend_from_slice(&extra);
                let ext = encode_causal_ngrams(&longer, &table, &sizes, None).unwrap();
                for t in 0..ids.len() {
                    prop_assert_eq!(base.position(t), ext.position(t));
                }
            }

            #[test]
            fn length_preserved((seed, ids, sizes) in arb_instance()) {
                let table = toy_table(32, 6, seed);
                let stack = encode_causal_ngrams(&ids, &table, &sizes, None).unwrap();
                prop_assert_eq!(stack.len(), ids.len());
            }

            #[test]
            fn mean_norm_bounded_by_max_window_norm((seed, ids, sizes) in arb_instance()) {
                let table = toy_table(32, 6, seed);
                let stack = encode_causal_ngrams(&ids, &table, &sizes, None).unwrap();
                for t in 0..ids.len() {
                    for (i, &n) in sizes.iter().enumerate() {
                        let g: f64 = stack.vector(t, i).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                        let start = (t + 1).saturating_sub(n);
                        let max_norm = (start..=t)
                            .map(|k| {
                                let row = table.row(ids[k]).unwrap();
                                row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
                            })
                            .fold(0.0f64, f64::max);
                        prop_assert!(g <= max_norm * (1.0 + 1e-6) + 1e-9, "g={g} max={max_norm}");
                    }
                }
            }

            #[test]
            fn saturated_window_is_order_insensitive(seed in any::<u64>(), mut ids in proptest::collection::vec(0u32..32, 6..24), n in 2usize..6) {
                let table = toy_table(32, 6, seed);
                let t = ids.len() - 1;
                if t + 1 < n { return Ok(()); }
                let before = encode_causal_ngrams(&ids, &table, &[n], None).unwrap();
                // Reverse the tokens inside the final window.
                ids[t + 1 - n..=t].reverse();
                let after = encode_causal_ngrams(&ids, &table, &[n], None).unwrap();
                for j in 0..6 {
                    let a = before.vector(t, 0)[j];
                    let b = after.vector(t, 0)[j];
                    prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
                }
            }
        }
    }
}
