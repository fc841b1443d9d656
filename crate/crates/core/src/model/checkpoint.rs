use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::transformer::{Layer, TransformerModel};
use crate::error::{Error, Result};
use crate::format::{self, Container};
use crate::numerics::{Element, Tensor};
use crate::patch::{PatchMatrix, Provenance};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LPM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct PatchEntry {
    slot: usize,
    order: usize,
    trained: bool,
    /// `(walsh exponent, paley factor)` of the rotation the patch was fused
    /// from, if any.
    rotation: Option<(u32, usize)>,
    matrix: String,
    scale: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    patches: Vec<PatchEntry>,
}

struct PayloadWriter {
    payload: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn add(&mut self, name: String, t: &Tensor<f32>) {
        let offset = self.payload.len() as u64;
        format::push_f32(&mut self.payload, t.data());
        self.entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: f32::DTYPE.to_string(),
            offset,
            length: (t.numel() * 4) as u64,
        });
    }
}

impl TransformerModel<f32> {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut w = PayloadWriter {
            payload: Vec::new(),
            entries: Vec::new(),
        };
        for (name, t) in self.weights() {
            w.add(name, t);
        }
        let mut patches = Vec::new();
        for (&slot, chain) in &self.patches {
            for (order, p) in chain.iter().enumerate() {
                let matrix = format!("patch.{slot}.{order}.matrix");
                w.add(matrix.clone(), p.matrix());
                let (rotation, scale) = match p.provenance() {
                    Some(prov) => {
                        let name = format!("patch.{slot}.{order}.scale");
                        let d = Tensor::new([prov.scale.len()], prov.scale.clone())?;
                        w.add(name.clone(), &d);
                        (prov.rotation, Some(name))
                    }
                    None => (None, None),
                };
                patches.push(PatchEntry {
                    slot,
                    order,
                    trained: p.trained(),
                    rotation,
                    matrix,
                    scale,
                });
            }
        }
        let meta = CheckpointMeta {
            config: self.config.clone(),
            tensors: w.entries,
            patches,
        };
        Container {
            magic: CHECKPOINT_MAGIC,
            version: CHECKPOINT_VERSION,
            metadata: serde_json::to_vec(&meta)
                .map_err(|e| Error::format("metadata", e.to_string()))?,
            payload: w.payload,
        }
        .to_bytes()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let parsed = Container::parse(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta: CheckpointMeta = serde_json::from_slice(parsed.metadata)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        meta.config
            .validate()
            .map_err(|e| Error::format("config", e.to_string()))?;
        let payload = parsed.payload;

        let mut expected_end = 0u64;
        let mut tensors: HashMap<String, Tensor<f32>> = HashMap::new();
        for e in &meta.tensors {
            let field = format!("tensor {}", e.name);
            if e.dtype != f32::DTYPE {
                return Err(Error::format(field, format!("unsupported dtype {}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != (numel * 4) as u64 {
                return Err(Error::format(field, "byte length does not match shape"));
            }
            if e.offset != expected_end {
                return Err(Error::format(field, "tensor offsets are not contiguous"));
            }
            let end = e.offset + e.length;
            if end > payload.len() as u64 {
                return Err(Error::format(
                    field,
                    format!("payload truncated: needs {end} bytes, has {}", payload.len()),
                ));
            }
            expected_end = end;
            let data = format::read_f32(&payload[e.offset as usize..end as usize]);
            if tensors
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
                .is_some()
            {
                return Err(Error::format(field, "duplicate tensor name"));
            }
        }
        if expected_end != payload.len() as u64 {
            return Err(Error::format(
                "payload",
                format!("{} trailing bytes after manifest", payload.len() as u64 - expected_end),
            ));
        }

        let cfg = meta.config;
        let (c, v, m) = (cfg.hidden_dim, cfg.vocab_size, cfg.mlp_dim);
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::format(name.clone(), "missing from manifest"))?;
            if t.shape() != shape {
                return Err(Error::format(
                    name,
                    format!("shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            Ok(t)
        };
        let token_embedding = take("tok_emb".into(), &[v, c])?;
        let position_embedding = take("pos_emb".into(), &[cfg.max_seq_len, c])?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(Layer {
                attn_norm: take(format!("layers.{i}.attn_norm"), &[c])?,
                w_qkv: take(format!("layers.{i}.w_qkv"), &[c, 3 * c])?,
                w_out: take(format!("layers.{i}.w_out"), &[c, c])?,
                mlp_norm: take(format!("layers.{i}.mlp_norm"), &[c])?,
                w_fc: take(format!("layers.{i}.w_fc"), &[c, m])?,
                w_proj: take(format!("layers.{i}.w_proj"), &[m, c])?,
            });
        }
        let final_norm = take("final_norm".into(), &[c])?;
        let lm_head = take("lm_head".into(), &[c, v])?;

        let mut patches: BTreeMap<usize, Vec<PatchMatrix<f32>>> = BTreeMap::new();
        for p in &meta.patches {
            if p.slot > cfg.n_layers {
                return Err(Error::format(
                    format!("patch {}", p.matrix),
                    format!("slot {} beyond depth {}", p.slot, cfg.n_layers),
                ));
            }
            let chain = patches.entry(p.slot).or_default();
            if chain.len() != p.order {
                return Err(Error::format(format!("patch {}", p.matrix), "patch order out of sequence"));
            }
            let matrix = take(p.matrix.clone(), &[c, c])?;
            let provenance = match &p.scale {
                Some(name) => Some(Provenance {
                    rotation: p.rotation,
                    scale: take(name.clone(), &[c])?.into_data(),
                }),
                None => None,
            };
            chain.push(PatchMatrix::from_parts(matrix, provenance, p.trained)?);
        }
        if let Some(name) = tensors.keys().next() {
            return Err(Error::format(format!("tensor {name}"), "not referenced by the model"));
        }

        Ok(TransformerModel {
            config: cfg,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            lm_head,
            patches,
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        format::write_file(path.as_ref(), &self.to_checkpoint_bytes()?)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&format::read_file(path.as_ref())?)
    }
}
