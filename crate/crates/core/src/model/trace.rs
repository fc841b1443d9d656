use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transformer::TransformerModel;
use crate::corpus::{self, TokenBatch};
use crate::error::{Error, Result};
use crate::format::{self, Container};
use crate::numerics::{Element, Tensor};

const TRACE_MAGIC: [u8; 4] = *b"LPT1";
const TRACE_VERSION: u32 = 1;

/// Layer inputs `X^(ℓ)` captured over a calibration batch.
///
/// Entry `ℓ < n_layers` is what layer `ℓ` received; entry `n_layers` is the
/// residual stream after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace<T = f32> {
    entries: Vec<Tensor<T>>,
    batch: usize,
    seq_len: usize,
}

#[derive(Serialize, Deserialize)]
struct TraceMeta {
    batch: usize,
    seq_len: usize,
    hidden_dim: usize,
    entries: usize,
}

impl<T: Element> HiddenTrace<T> {
    pub fn new(entries: Vec<Tensor<T>>, batch: usize, seq_len: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::input("trace has no entries"));
        }
        let c = entries[0].last_dim();
        for e in &entries {
            if e.shape() != [batch, seq_len, c] {
                return Err(Error::Shape {
                    op: "trace",
                    lhs: vec![batch, seq_len, c],
                    rhs: e.shape().to_vec(),
                });
            }
        }
        Ok(HiddenTrace {
            entries,
            batch,
            seq_len,
        })
    }

    /// Number of layers the trace spans (`entries - 1`).
    pub fn n_layers(&self) -> usize {
        self.entries.len() - 1
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn hidden_dim(&self) -> usize {
        self.entries[0].last_dim()
    }

    pub fn entries(&self) -> &[Tensor<T>] {
        &self.entries
    }

    pub fn entry(&self, layer: usize) -> Result<&Tensor<T>> {
        self.entries.get(layer).ok_or_else(|| {
            Error::input(format!(
                "trace has {} entries, layer {layer} requested",
                self.entries.len()
            ))
        })
    }

    /// Sample `i` of entry `layer`, flattened to `L·C` values.
    pub fn sample(&self, layer: usize, i: usize) -> &[T] {
        let n = self.seq_len * self.hidden_dim();
        &self.entries[layer].data()[i * n..(i + 1) * n]
    }

    /// Stacks traces along the batch axis.
    pub fn concat(parts: Vec<HiddenTrace<T>>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or_else(|| Error::input("no traces to concatenate"))?;
        let (seq, c, n) = (first.seq_len, first.hidden_dim(), first.entries.len());
        let mut batch = first.batch;
        let mut data: Vec<Vec<T>> = first.entries.into_iter().map(Tensor::into_data).collect();
        for part in iter {
            if part.seq_len != seq || part.hidden_dim() != c || part.entries.len() != n {
                return Err(Error::input("traces disagree on shape"));
            }
            batch += part.batch;
            for (d, e) in data.iter_mut().zip(part.entries) {
                d.extend(e.into_data());
            }
        }
        let entries = data
            .into_iter()
            .map(|d| Tensor::new([batch, seq, c], d))
            .collect::<Result<Vec<_>>>()?;
        HiddenTrace::new(entries, batch, seq)
    }

    /// Runs `model` over `windows` in chunks and captures every layer input.
    pub fn collect<W: AsRef<[u32]>>(
        model: &TransformerModel<T>,
        windows: &[W],
        chunk: usize,
    ) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::input("no calibration windows"));
        }
        let parts = corpus::batches(windows, chunk.max(1))?
            .iter()
            .map(|b| model.forward_traced(b).map(|(_, t)| t))
            .collect::<Result<Vec<_>>>()?;
        Self::concat(parts)
    }
}

impl HiddenTrace<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = TraceMeta {
            batch: self.batch,
            seq_len: self.seq_len,
            hidden_dim: self.hidden_dim(),
            entries: self.entries.len(),
        };
        let mut payload = Vec::new();
        for e in &self.entries {
            format::push_f32(&mut payload, e.data());
        }
        Container {
            magic: TRACE_MAGIC,
            version: TRACE_VERSION,
            metadata: serde_json::to_vec(&meta).map_err(|e| Error::format("metadata", e.to_string()))?,
            payload,
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::parse(bytes, TRACE_MAGIC, TRACE_VERSION)?;
        let meta: TraceMeta = serde_json::from_slice(&c.metadata)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        let per = meta.batch * meta.seq_len * meta.hidden_dim;
        if meta.entries == 0 || c.payload.len() != meta.entries * per * 4 {
            return Err(Error::format(
                "payload",
                format!(
                    "expected {} bytes for {} entries, found {}",
                    meta.entries * per * 4,
                    meta.entries,
                    c.payload.len()
                ),
            ));
        }
        let entries = c
            .payload
            .chunks(per * 4)
            .map(|chunk| Tensor::new([meta.batch, meta.seq_len, meta.hidden_dim], format::read_f32(chunk)))
            .collect::<Result<Vec<_>>>()?;
        HiddenTrace::new(entries, meta.batch, meta.seq_len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&format::read_file(path.as_ref())?)
    }
}

/// Convenience for tests and tools: trace a single batch.
pub fn trace_batch<T: Element>(model: &TransformerModel<T>, tokens: &TokenBatch) -> Result<HiddenTrace<T>> {
    model.forward_traced(tokens).map(|(_, t)| t)
}
