//! Byte-level token streams and window batching.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A `[batch, seq_len]` block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    batch: usize,
    seq_len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, batch: usize, seq_len: usize) -> Result<Self> {
        if ids.len() != batch * seq_len {
            return Err(Error::Shape {
                op: "token_batch",
                lhs: vec![batch, seq_len],
                rhs: vec![ids.len()],
            });
        }
        Ok(TokenBatch {
            ids,
            batch,
            seq_len,
        })
    }

    /// Stacks equal-length windows into one batch.
    pub fn from_windows<W: AsRef<[u32]>>(windows: &[W]) -> Result<Self> {
        let seq_len = windows.first().map_or(0, |w| w.as_ref().len());
        let mut ids = Vec::with_capacity(windows.len() * seq_len);
        for w in windows {
            let w = w.as_ref();
            if w.len() != seq_len {
                return Err(Error::input("windows in one batch must share a length"));
            }
            ids.extend_from_slice(w);
        }
        Self::new(ids, windows.len(), seq_len)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn ids_usize(&self) -> Vec<usize> {
        self.ids.iter().map(|&t| t as usize).collect()
    }
}

pub fn bytes_to_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Reads a file as a byte-level token stream.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::input(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes_to_tokens(&bytes))
}

/// Splits off the trailing `fraction` of the stream as held-out data.
pub fn split_holdout(tokens: &[u32], fraction: f64) -> (&[u32], &[u32]) {
    let cut = ((tokens.len() as f64) * (1.0 - fraction)).round() as usize;
    tokens.split_at(cut.min(tokens.len()))
}

/// Consecutive non-overlapping windows of `seq_len`, at most `limit` of them.
pub fn windows(tokens: &[u32], seq_len: usize, limit: Option<usize>) -> Vec<&[u32]> {
    if seq_len == 0 {
        return Vec::new();
    }
    let n = tokens.len() / seq_len;
    let n = limit.map_or(n, |l| l.min(n));
    (0..n).map(|i| &tokens[i * seq_len..(i + 1) * seq_len]).collect()
}

/// `count` windows of `seq_len` starting at seeded random offsets.
pub fn sample_windows(tokens: &[u32], seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 || tokens.len() < seq_len {
        return Err(Error::input(format!(
            "corpus of {} tokens cannot supply windows of {seq_len}",
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = tokens.len() - seq_len + 1;
    Ok((0..count)
        .map(|_| {
            let start = rng.random_range(0..span);
            tokens[start..start + seq_len].to_vec()
        })
        .collect())
}

/// Groups windows into batches of at most `batch_size`.
pub fn batches<W: AsRef<[u32]>>(windows: &[W], batch_size: usize) -> Result<Vec<TokenBatch>> {
    if batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    windows.chunks(batch_size).map(TokenBatch::from_windows).collect()
}
