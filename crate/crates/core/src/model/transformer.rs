use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::trace::HiddenTrace;
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{Element, Tape, Tensor, Var};
use crate::patch::PatchMatrix;

/// Weights of one pre-norm decoder layer.
///
/// The layer maps `x -> x + attn(norm(x)) -> (.) + mlp(norm(.))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T = f32> {
    pub attn_norm: Tensor<T>,
    /// `[C, 3C]`: query, key and value projections side by side.
    pub w_qkv: Tensor<T>,
    pub w_out: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_fc: Tensor<T>,
    pub w_proj: Tensor<T>,
}

impl<T: Element> Layer<T> {
    fn init(c: usize, mlp: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Layer {
            attn_norm: Tensor::ones([c]),
            w_qkv: Tensor::randn([c, 3 * c], std, rng),
            w_out: Tensor::randn([c, c], std, rng),
            mlp_norm: Tensor::ones([c]),
            w_fc: Tensor::randn([c, mlp], std, rng),
            w_proj: Tensor::randn([mlp, c], std, rng),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("attn_norm", &self.attn_norm),
            ("w_qkv", &self.w_qkv),
            ("w_out", &self.w_out),
            ("mlp_norm", &self.mlp_norm),
            ("w_fc", &self.w_fc),
            ("w_proj", &self.w_proj),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.attn_norm,
            &mut self.w_qkv,
            &mut self.w_out,
            &mut self.mlp_norm,
            &mut self.w_fc,
            &mut self.w_proj,
        ]
    }

    /// Zeroes both output projections so the layer computes `f ≡ 0`.
    pub fn zero_output_projections(&mut self) {
        self.w_out.data_mut().fill(T::zero());
        self.w_proj.data_mut().fill(T::zero());
    }

    fn cast<U: Element>(&self) -> Layer<U> {
        Layer {
            attn_norm: self.attn_norm.cast(),
            w_qkv: self.w_qkv.cast(),
            w_out: self.w_out.cast(),
            mlp_norm: self.mlp_norm.cast(),
            w_fc: self.w_fc.cast(),
            w_proj: self.w_proj.cast(),
        }
    }
}

/// Which weights a [`TransformerModel::bind`] call marks as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Backbone,
    Patches,
}

/// Tape handles for one layer's weights.
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub w_qkv: Var,
    pub w_out: Var,
    pub mlp_norm: Var,
    pub w_fc: Var,
    pub w_proj: Var,
}

/// Tape handles for every weight of a model.
#[derive(Clone, Debug)]
pub struct Bound {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Var,
    /// Patch chains keyed by slot, in application order.
    pub patches: BTreeMap<usize, Vec<Var>>,
}

impl Bound {
    /// Backbone weight handles in [`TransformerModel::weights`] order.
    pub fn backbone_vars(&self) -> Vec<Var> {
        let mut v = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            v.extend([l.attn_norm, l.w_qkv, l.w_out, l.mlp_norm, l.w_fc, l.w_proj]);
        }
        v.push(self.final_norm);
        v.push(self.lm_head);
        v
    }

    /// Patch handles in slot order, chains flattened.
    pub fn patch_vars(&self) -> Vec<Var> {
        self.patches.values().flatten().copied().collect()
    }
}

/// Output of a forward pass recorded on a tape.
pub struct Forward {
    pub logits: Var,
    /// `hidden[ℓ]` is exactly what layer `ℓ` received (after any patch at
    /// slot `ℓ`); the last entry is the residual stream entering the final norm.
    pub hidden: Vec<Var>,
}

/// Pre-norm decoder-only language model with optional patch slots.
///
/// A patch registered at slot `ℓ` multiplies the residual stream right before
/// layer `ℓ` (slot `n_layers` sits in front of the final norm).
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel<T = f32> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<T>,
    /// Learned absolute positions, `[max_seq_len, C]`.
    pub position_embedding: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
    pub patches: BTreeMap<usize, Vec<PatchMatrix<T>>>,
}

impl<T: Element> TransformerModel<T> {
    /// Seeded initialization: N(0, 0.02²) weights, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, v) = (config.hidden_dim, config.vocab_size);
        let std = 0.02;
        let token_embedding = Tensor::randn([v, c], std, &mut rng);
        let position_embedding = Tensor::randn([config.max_seq_len, c], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| Layer::init(c, config.mlp_dim, std, &mut rng))
            .collect();
        let lm_head = Tensor::randn([c, v], std, &mut rng);
        Ok(TransformerModel {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm: Tensor::ones([c]),
            lm_head,
            patches: BTreeMap::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Total number of registered patch matrices.
    pub fn patch_count(&self) -> usize {
        self.patches.values().map(Vec::len).sum()
    }

    /// Named backbone weights in a fixed order.
    pub fn weights(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.token_embedding),
            ("pos_emb".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable backbone weights, same order as [`Self::weights`].
    pub fn weights_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Mutable patch matrices in slot order.
    pub fn patches_mut(&mut self) -> Vec<&mut PatchMatrix<T>> {
        self.patches.values_mut().flatten().collect()
    }

    /// Re-expresses every weight in another precision.
    pub fn cast<U: Element>(&self) -> TransformerModel<U> {
        TransformerModel {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
            patches: self
                .patches
                .iter()
                .map(|(&k, v)| (k, v.iter().map(PatchMatrix::cast).collect()))
                .collect(),
        }
    }

    /// Registers every weight on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: Trainable) -> Bound {
        let backbone = trainable == Trainable::Backbone;
        let mut leaf = |t: &Tensor<T>, grad: bool| tape.leaf(t.clone().with_grad(grad));
        let token_embedding = leaf(&self.token_embedding, backbone);
        let position_embedding = leaf(&self.position_embedding, backbone);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: leaf(&l.attn_norm, backbone),
                w_qkv: leaf(&l.w_qkv, backbone),
                w_out: leaf(&l.w_out, backbone),
                mlp_norm: leaf(&l.mlp_norm, backbone),
                w_fc: leaf(&l.w_fc, backbone),
                w_proj: leaf(&l.w_proj, backbone),
            })
            .collect();
        let final_norm = leaf(&self.final_norm, backbone);
        let lm_head = leaf(&self.lm_head, backbone);
        let patches = self
            .patches
            .iter()
            .map(|(&slot, chain)| {
                let vars = chain
                    .iter()
                    .map(|p| leaf(p.matrix(), trainable == Trainable::Patches))
                    .collect();
                (slot, vars)
            })
            .collect();
        Bound {
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            lm_head,
            patches,
        }
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq_len() == 0 || tokens.batch() == 0 {
            return Err(Error::input("empty token batch"));
        }
        if tokens.seq_len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} exceeds model maximum {}",
                tokens.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens
            .ids()
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings, `[B, L, C]`.
    pub fn embed_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &TokenBatch) -> Result<Var> {
        self.check_tokens(tokens)?;
        let (b, l) = (tokens.batch(), tokens.seq_len());
        let tok = tape.embedding(bound.token_embedding, &tokens.ids_usize(), &[b, l])?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = tape.embedding(bound.position_embedding, &positions, &[l])?;
        tape.add_broadcast(tok, pos)
    }

    /// The residual update `f(x)` of layer `index`.
    pub fn layer_update_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        index: usize,
        x: Var,
    ) -> Result<Var> {
        let after = self.layer_on_tape(tape, bound, index, x)?;
        let neg = tape.scale(x, -T::one())?;
        tape.add(after, neg)
    }

    fn layer_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, index: usize, x: Var) -> Result<Var> {
        let w = &bound.layers[index];
        let eps = self.config.rms_eps;
        let h = tape.rms_norm(x, w.attn_norm, eps)?;
        let qkv = tape.matmul(h, w.w_qkv)?;
        let att = tape.causal_attention(qkv, self.config.n_heads)?;
        let o = tape.matmul(att, w.w_out)?;
        let x = tape.add(x, o)?;
        let h = tape.rms_norm(x, w.mlp_norm, eps)?;
        let u = tape.matmul(h, w.w_fc)?;
        let u = tape.gelu(u)?;
        let m = tape.matmul(u, w.w_proj)?;
        tape.add(x, m)
    }

    fn apply_patches(&self, tape: &mut Tape<T>, bound: &Bound, slot: usize, mut x: Var) -> Result<Var> {
        if let Some(chain) = bound.patches.get(&slot) {
            for &p in chain {
                x = tape.matmul(x, p)?;
            }
        }
        Ok(x)
    }

    /// Runs layers `start..` on `x`, the residual stream entering layer
    /// `start`. The patch at slot `start` is applied only when
    /// `patch_start` is set.
    pub fn run_from_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        start: usize,
        mut x: Var,
        patch_start: bool,
    ) -> Result<Forward> {
        if start > self.n_layers() {
            return Err(Error::input(format!(
                "start layer {start} beyond depth {}",
                self.n_layers()
            )));
        }
        let mut hidden = Vec::with_capacity(self.n_layers() + 1 - start);
        for slot in start..=self.n_layers() {
            if slot > start || patch_start {
                x = self.apply_patches(tape, bound, slot, x)?;
            }
            hidden.push(x);
            if slot < self.n_layers() {
                x = self.layer_on_tape(tape, bound, slot, x)?;
            }
        }
        let y = tape.rms_norm(x, bound.final_norm, self.config.rms_eps)?;
        let logits = tape.matmul(y, bound.lm_head)?;
        Ok(Forward { logits, hidden })
    }

    pub fn forward_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &TokenBatch) -> Result<Forward> {
        let x = self.embed_on_tape(tape, bound, tokens)?;
        self.run_from_on_tape(tape, bound, 0, x, true)
    }

    /// Residual stream entering layer `slot` (after the patch there), without
    /// running the rest of the network.
    pub fn prefix_on_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &TokenBatch,
        slot: usize,
    ) -> Result<Var> {
        if slot > self.n_layers() {
            return Err(Error::input(format!("slot {slot} beyond depth {}", self.n_layers())));
        }
        let mut x = self.embed_on_tape(tape, bound, tokens)?;
        for l in 0..slot {
            x = self.apply_patches(tape, bound, l, x)?;
            x = self.layer_on_tape(tape, bound, l, x)?;
        }
        self.apply_patches(tape, bound, slot, x)
    }

    /// Logits `[B, L, V]`.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let out = self.forward_on_tape(&mut tape, &bound, tokens)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Logits plus every layer input.
    pub fn forward_traced(&self, tokens: &TokenBatch) -> Result<(Tensor<T>, HiddenTrace<T>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let out = self.forward_on_tape(&mut tape, &bound, tokens)?;
        let entries = out.hidden.iter().map(|&h| tape.value(h).clone()).collect();
        let trace = HiddenTrace::new(entries, tokens.batch(), tokens.seq_len())?;
        Ok((tape.value(out.logits).clone(), trace))
    }

    /// Re-runs layers `start..` from a captured layer input (which already
    /// includes any patch at `start`) and returns the logits.
    pub fn replay_from(&self, start: usize, hidden: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let x = tape.constant(hidden.clone());
        let out = self.run_from_on_tape(&mut tape, &bound, start, x, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// `f(x)` of layer `index` evaluated on a concrete hidden state.
    pub fn layer_update(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        if index >= self.n_layers() {
            return Err(Error::input(format!("layer {index} out of range")));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::Nothing);
        let xv = tape.constant(x.clone());
        let f = self.layer_update_on_tape(&mut tape, &bound, index, xv)?;
        Ok(tape.value(f).clone())
    }
}

fn hash_tensor<T: Element>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update(name.as_bytes());
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.as_f64().to_le_bytes());
    }
}

impl<T: Element> TransformerModel<T> {
    /// SHA-256 over every non-patch weight (names, shapes and values).
    pub fn backbone_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.weights() {
            hash_tensor(&mut h, &name, t);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every patch matrix and its slot.
    pub fn patch_digest(&self) -> String {
        let mut h = Sha256::new();
        for (slot, chain) in &self.patches {
            for (j, p) in chain.iter().enumerate() {
                hash_tensor(&mut h, &format!("patch.{slot}.{j}"), p.matrix());
            }
        }
        hex::encode(h.finalize())
    }
}
