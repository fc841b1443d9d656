use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{self, TokenBatch};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::Element;

pub const CACHE_MAGIC: [u8; 4] = *b"LPL1";
pub const CACHE_VERSION: u32 = 1;
/// Magic, version, `K`, `V`, sequence count and sequence length.
pub const CACHE_HEADER_BYTES: usize = 4 + 4 + 4 + 4 + 8 + 4;

/// Teacher top-`K` probabilities for every position of a set of windows.
///
/// Per position the entries are ordered by probability, highest first, with
/// equal probabilities in ascending index order.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsCache {
    k: usize,
    vocab: usize,
    sequences: usize,
    seq_len: usize,
    indices: Vec<u32>,
    probs: Vec<f32>,
}

impl LogitsCache {
    /// Validates and wraps raw entries.
    pub fn from_parts(
        k: usize,
        vocab: usize,
        sequences: usize,
        seq_len: usize,
        indices: Vec<u32>,
        probs: Vec<f32>,
    ) -> Result<Self> {
        if k == 0 || k > vocab {
            return Err(Error::input(format!("K = {k} must be in 1..={vocab}")));
        }
        let positions = sequences * seq_len;
        if indices.len() != positions * k || probs.len() != positions * k {
            return Err(Error::format(
                "entries",
                format!(
                    "{} indices and {} probabilities for {positions} positions of K = {k}",
                    indices.len(),
                    probs.len()
                ),
            ));
        }
        let cache = LogitsCache {
            k,
            vocab,
            sequences,
            seq_len,
            indices,
            probs,
        };
        cache.validate()?;
        Ok(cache)
    }

    fn validate(&self) -> Result<()> {
        let mut sorted = Vec::with_capacity(self.k);
        for pos in 0..self.positions() {
            let (idx, p) = self.entry(pos);
            let field = || format!("position {pos}");
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= self.vocab) {
                return Err(Error::format(field(), format!("index {bad} outside vocabulary {}", self.vocab)));
            }
            sorted.clear();
            sorted.extend_from_slice(idx);
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::format(field(), "duplicate vocabulary index"));
            }
            if p.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::format(field(), "probabilities must be positive and finite"));
            }
            if p.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::format(field(), "probabilities are not in decreasing order"));
            }
            let mass: f64 = p.iter().map(|&v| f64::from(v)).sum();
            if mass > 1.0 + 1e-6 {
                return Err(Error::format(field(), format!("probabilities sum to {mass}")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn sequences(&self) -> usize {
        self.sequences
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn positions(&self) -> usize {
        self.sequences * self.seq_len
    }

    /// Indices and probabilities stored for one position.
    pub fn entry(&self, position: usize) -> (&[u32], &[f32]) {
        let r = position * self.k..(position + 1) * self.k;
        (&self.indices[r.clone()], &self.probs[r])
    }

    /// Bytes stored per position: `K` u32 indices plus `K` f32 probabilities.
    pub fn position_bytes(&self) -> usize {
        self.k * 8
    }

    pub fn file_len(&self) -> usize {
        CACHE_HEADER_BYTES + self.positions() * self.position_bytes()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.vocab as u32).to_le_bytes())?;
        w.write_all(&(self.sequences as u64).to_le_bytes())?;
        w.write_all(&(self.seq_len as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.position_bytes());
        for pos in 0..self.positions() {
            let (idx, p) = self.entry(pos);
            buf.clear();
            for i in idx {
                buf.extend_from_slice(&i.to_le_bytes());
            }
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; CACHE_HEADER_BYTES];
        r.read_exact(&mut header)
            .map_err(|_| Error::format("header", "file shorter than the cache header"))?;
        if header[..4] != CACHE_MAGIC {
            return Err(Error::format(
                "magic",
                format!("expected \"LPL1\", found {:?}", String::from_utf8_lossy(&header[..4])),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CACHE_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let k = u32_at(8) as usize;
        let vocab = u32_at(12) as usize;
        let sequences = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
        let seq_len = u32_at(24) as usize;
        if k == 0 || k > vocab {
            return Err(Error::format("K", format!("K = {k} with vocabulary {vocab}")));
        }
        let positions = sequences
            .checked_mul(seq_len)
            .filter(|p| p.checked_mul(k * 8).is_some())
            .ok_or_else(|| Error::format("sequence count", "header sizes overflow"))?;
        let mut indices = Vec::with_capacity(positions * k);
        let mut probs = Vec::with_capacity(positions * k);
        let mut buf = vec![0u8; k * 8];
        for pos in 0..positions {
            r.read_exact(&mut buf).map_err(|_| {
                Error::format("entries", format!("truncated at position {pos} of {positions}"))
            })?;
            let (ib, pb) = buf.split_at(k * 4);
            indices.extend(ib.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())));
            probs.extend(pb.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(|e| Error::format("entries", e.to_string()))? != 0 {
            return Err(Error::format("entries", "trailing bytes after the last position"));
        }
        Self::from_parts(k, vocab, sequences, seq_len, indices, probs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Top-`k` of a full softmax over `logits`, highest first.
pub fn top_k_probs(logits: &[f64], k: usize) -> (Vec<u32>, Vec<f32>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let mut order: Vec<u32> = (0..logits.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        logits[*b as usize]
            .total_cmp(&logits[*a as usize])
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    // Clamp so a vanishing tail entry stays strictly positive in f32.
    let probs = order
        .iter()
        .map(|&i| (((logits[i as usize] - max).exp() / z) as f32).max(f32::MIN_POSITIVE))
        .collect();
    (order, probs)
}

/// Runs `teacher` over the first `max_sequences` non-overlapping windows of
/// `tokens` and keeps the top-`k` probabilities at every position.
pub fn cache_teacher_logits<T: Element>(
    teacher: &TransformerModel<T>,
    tokens: &[u32],
    seq_len: usize,
    k: usize,
    max_sequences: Option<usize>,
) -> Result<LogitsCache> {
    let vocab = teacher.vocab_size();
    if k == 0 || k > vocab {
        return Err(Error::input(format!("K = {k} must be in 1..={vocab}")));
    }
    let windows = corpus::windows(tokens, seq_len, max_sequences);
    if windows.is_empty() {
        return Err(Error::input(format!(
            "corpus of {} tokens holds no window of {seq_len}",
            tokens.len()
        )));
    }
    let mut indices = Vec::with_capacity(windows.len() * seq_len * k);
    let mut probs = Vec::with_capacity(windows.len() * seq_len * k);
    let mut row = vec![0.0f64; vocab];
    for chunk in windows.chunks(crate::eval::DEFAULT_EVAL_BATCH) {
        let logits = teacher.forward(&TokenBatch::from_windows(chunk)?)?;
        for z in logits.data().chunks_exact(vocab) {
            for (r, v) in row.iter_mut().zip(z) {
                *r = v.as_f64();
            }
            let (i, p) = top_k_probs(&row, k);
            indices.extend(i);
            probs.extend(p);
        }
    }
    LogitsCache::from_parts(k, vocab, windows.len(), seq_len, indices, probs)
}
