//! Streaming n-gram state for autoregressive decoding.
//!
//! The n-gram vector at the newest position only depends on the most recent
//! `max(sizes)` token embeddings, so decode steps keep a ring buffer of the
//! last `max(sizes) - 1` embeddings and rebuild each window sum from it.
//! Per-step cost is therefore independent of the prefix length, and because
//! the sums are accumulated in the same left-to-right order as the batch
//! encoder, streamed outputs are bit-identical to the batch rows.

use crate::error::{Error, Result};

use super::{sum_rows_into, validate_sizes, EmbeddingTable, TokenId};

/// Single-writer incremental encoder state. May move between threads but is
/// never shared mutably.
#[derive(Debug, Clone)]
pub struct StreamingNgramState {
    sizes: Vec<usize>,
    dim: usize,
    /// Ring of the last `slots` embeddings, flat `slots * dim`.
    window: Vec<f32>,
    /// Parallel flags; a masked slot is excluded from every window sum.
    masked: Vec<bool>,
    slots: usize,
    filled: usize,
    next: usize,
    /// Per-scale window sums of the most recent step, flat `|sizes| * dim`.
    sums: Vec<f32>,
    /// Number of tokens pushed so far (the current position t).
    position: usize,
}

impl StreamingNgramState {
    pub fn new(table: &EmbeddingTable, sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let dim = table.dim();
        let slots = sizes.last().copied().unwrap_or(1) - 1;
        Ok(StreamingNgramState {
            sizes: sizes.to_vec(),
            dim,
            window: vec![0.0; slots * dim],
            masked: vec![false; slots],
            slots,
            filled: 0,
            next: 0,
            sums: vec![0.0; sizes.len() * dim],
            position: 0,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tokens pushed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Number of retained embeddings: `max(sizes) - 1`.
    pub fn window_capacity(&self) -> usize {
        self.slots
    }

    /// Window sums of the latest step (zero vectors before any push),
    /// flat scale-major `|sizes| * dim`.
    pub fn running_sums(&self) -> &[f32] {
        &self.sums
    }

    /// Pushes one token and returns the pooled vectors for the new position,
    /// scale-major `|sizes| * dim`. Equal to row `position` of the batch
    /// encoder run over the whole prefix.
    pub fn push(&mut self, token: TokenId, table: &EmbeddingTable) -> Result<Vec<f32>> {
        let mut ops = 0u64;
        self.push_counted(token, table, &mut ops)
    }

    /// [`StreamingNgramState::push`] accumulating f32 op counts into `ops`.
    pub fn push_counted(
        &mut self,
        token: TokenId,
        table: &EmbeddingTable,
        ops: &mut u64,
    ) -> Result<Vec<f32>> {
        let mut out = vec![0.0f32; self.sizes.len() * self.dim];
        self.push_into(token, table, &mut out, ops)?;
        Ok(out)
    }

    /// Allocation-free variant; `out` must hold `|sizes| * dim` values.
    pub fn push_into(
        &mut self,
        token: TokenId,
        table: &EmbeddingTable,
        out: &mut [f32],
        ops: &mut u64,
    ) -> Result<()> {
        self.push_masked_into(token, false, table, out, ops)
    }

    /// Push with an explicit mask flag: a masked token (e.g. a non-text
    /// position) contributes a zero vector to every window it falls in,
    /// while the divisor stays `n`.
    pub fn push_masked_into(
        &mut self,
        token: TokenId,
        is_masked: bool,
        table: &EmbeddingTable,
        out: &mut [f32],
        ops: &mut u64,
    ) -> Result<()> {
        if out.len() != self.sizes.len() * self.dim {
            return Err(Error::Shape(format!(
                "output buffer has {} values, expected {}",
                out.len(),
                self.sizes.len() * self.dim
            )));
        }
        if table.dim() != self.dim {
            return Err(Error::Shape(format!(
                "table dim {} does not match state dim {}",
                table.dim(),
                self.dim
            )));
        }
        let embed = table.row(token)?;
        let dim = self.dim;
        let oldest = if self.slots == 0 {
            0
        } else {
            (self.next + self.slots - self.filled) % self.slots
        };

        let mut rows: Vec<&[f32]> = Vec::with_capacity(self.sizes.last().copied().unwrap_or(1));
        for (i, &n) in self.sizes.iter().enumerate() {
            // Previous tokens in this window, oldest first, then the new
            // one; masked entries drop out of the sum.
            let prev = (n - 1).min(self.position).min(self.filled);
            rows.clear();
            for k in 0..prev {
                let slot = (oldest + (self.filled - prev) + k) % self.slots;
                if !self.masked[slot] {
                    rows.push(&self.window[slot * dim..(slot + 1) * dim]);
                }
            }
            if !is_masked {
                rows.push(embed);
            }

            let sums = &mut self.sums[i * dim..(i + 1) * dim];
            *ops += sum_rows_into(sums, &rows);
            let nf = n as f32;
            let dst = &mut out[i * dim..(i + 1) * dim];
            for (o, s) in dst.iter_mut().zip(sums.iter()) {
                *o = *s / nf;
            }
            *ops += dim as u64;
        }

        if self.slots > 0 {
            self.window[self.next * dim..(self.next + 1) * dim].copy_from_slice(embed);
            self.masked[self.next] = is_masked;
            self.next = (self.next + 1) % self.slots;
            self.filled = (self.filled + 1).min(self.slots);
        }
        self.position += 1;
        Ok(())
    }

    /// Fast-forwards the state to the end of `prefix` without producing
    /// outputs: only the trailing `max(sizes) - 1` embeddings are loaded, so
    /// the cost is independent of the prefix length.
    pub fn warm_from_prefix(&mut self, prefix: &[TokenId], table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.dim {
            return Err(Error::Shape(format!(
                "table dim {} does not match state dim {}",
                table.dim(),
                self.dim
            )));
        }
        let keep = prefix.len().min(self.slots);
        self.window.fill(0.0);
        self.masked.fill(false);
        self.filled = keep;
        self.next = if self.slots == 0 { 0 } else { keep % self.slots };
        for (k, &id) in prefix[prefix.len() - keep..].iter().enumerate() {
            let row = table.row(id)?;
            self.window[k * self.dim..(k + 1) * self.dim].copy_from_slice(row);
        }
        self.sums.fill(0.0);
        self.position = prefix.len();
        Ok(())
    }
}
