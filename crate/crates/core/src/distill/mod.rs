//! Offline top-K distillation of the patch matrices alone.

mod cache;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{cache_teacher_logits, top_k_probs, LogitsCache, CACHE_HEADER_BYTES, CACHE_MAGIC, CACHE_VERSION};

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{HiddenTrace, Trainable, TransformerModel};
use crate::numerics::{AdamW, AdamWConfig, Element, Tape, Tensor};

/// Which objective [`distill_patch`] optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DistillLoss {
    /// KL divergence against cached teacher top-K probabilities.
    Kl,
    /// Mean squared error between the patched interface and the teacher's
    /// block output.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Leading cache entries used per position; capped by the cache's `K`.
    pub k: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Windows (or trace samples) drawn per epoch.
    pub samples: usize,
    pub batch_size: usize,
    pub loss: DistillLoss,
    /// Train only the diagonal of each patch.
    pub diag_only: bool,
    pub weight_decay: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            k: 100,
            lr: 1e-4,
            epochs: 1,
            samples: 5000,
            batch_size: 4,
            loss: DistillLoss::Kl,
            diag_only: false,
            weight_decay: 0.0,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub step_losses: Vec<f64>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Training signal for [`distill_patch`].
pub enum DistillData<'a, T> {
    /// Token stream whose consecutive `cache.seq_len()` windows line up with
    /// the cached sequences.
    TopK { tokens: &'a [u32], cache: &'a LogitsCache },
    /// Teacher trace; the patched `trace[start]` should match `trace[start+n]`.
    Features { trace: &'a HiddenTrace<T>, start: usize, n: usize },
}

/// KL(teacher ‖ student) over a shared support, teacher renormalized.
pub fn kl_topk_loss(teacher: &[f64], student_logits: &[f64]) -> Result<f64> {
    if teacher.len() != student_logits.len() || teacher.is_empty() {
        return Err(Error::input("teacher and student supports differ"));
    }
    let mass: f64 = teacher.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::contract("teacher slice has no probability mass"));
    }
    let max = student_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = student_logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    Ok(teacher
        .iter()
        .zip(student_logits)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, z)| {
            let p = p / mass;
            p * (p.ln() - (z - lse))
        })
        .sum())
}

pub fn mse_feature_loss<T: Element>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::input(format!(
            "feature shapes differ: {:?} vs {:?}",
            teacher.shape(),
            student.shape()
        )));
    }
    if teacher.numel() == 0 {
        return Err(Error::input("empty feature tensors"));
    }
    let total: f64 = teacher
        .data()
        .iter()
        .zip(student.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(total / teacher.numel() as f64)
}

/// Cached teacher targets for one batch, flattened over positions.
#[derive(Clone, Debug)]
pub struct TopKTargets<T> {
    pub k: usize,
    pub indices: Vec<usize>,
    pub probs: Vec<T>,
}

impl<T: Element> TopKTargets<T> {
    /// The leading `k` entries of the cached sequences `seqs`.
    pub fn from_cache(cache: &LogitsCache, seqs: &[usize], k: usize) -> Self {
        let l = cache.seq_len();
        let mut indices = Vec::with_capacity(seqs.len() * l * k);
        let mut probs = Vec::with_capacity(seqs.len() * l * k);
        for &s in seqs {
            for pos in s * l..(s + 1) * l {
                let (i, p) = cache.entry(pos);
                indices.extend(i[..k].iter().map(|&v| v as usize));
                probs.extend(p[..k].iter().map(|&v| T::of(f64::from(v))));
            }
        }
        TopKTargets { k, indices, probs }
    }
}

/// Mean top-K KL of `model` on one batch and its gradient with respect to
/// every patch matrix (slot order, chains flattened).
pub fn kl_batch<T: Element>(
    model: &TransformerModel<T>,
    tokens: &TokenBatch,
    targets: &TopKTargets<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Patches);
    let fwd = model.forward_on_tape(&mut tape, &bound, tokens)?;
    let loss = tape.kl_topk(fwd.logits, &targets.indices, &targets.probs, targets.k)?;
    patch_grads(&tape, loss, &bound.patch_vars())
}

/// MSE between `input` pushed through the patch chain at `slot` and
/// `target`, with gradients for every patch matrix.
pub fn mse_batch<T: Element>(
    model: &TransformerModel<T>,
    slot: usize,
    input: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::Patches);
    let chain = bound
        .patches
        .get(&slot)
        .ok_or_else(|| Error::contract(format!("no patch registered at interface {slot}")))?;
    let mut x = tape.constant(input.clone());
    for &p in chain {
        x = tape.matmul(x, p)?;
    }
    let t = tape.constant(target.clone());
    let loss = tape.mse(x, t)?;
    patch_grads(&tape, loss, &bound.patch_vars())
}

fn patch_grads<T: Element>(
    tape: &Tape<T>,
    loss: crate::numerics::Var,
    vars: &[crate::numerics::Var],
) -> Result<(f64, Vec<Tensor<T>>)> {
    let value = tape.value(loss).item()?.as_f64();
    let mut grads = tape.backward(loss)?;
    let gs = vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();
    Ok((value, gs))
}

fn rows_of<T: Element>(t: &Tensor<T>, rows: &[usize], row_len: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * row_len..(r + 1) * row_len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data).expect("row gather keeps shape")
}

/// Fine-tunes every patch matrix of `student` while every other weight stays
/// frozen. Returns per-step and per-epoch mean losses.
pub fn distill_patch<T: Element>(
    student: &mut TransformerModel<T>,
    data: DistillData<'_, T>,
    config: &DistillConfig,
) -> Result<DistillReport> {
    if student.patch_count() == 0 {
        return Err(Error::contract("distillation needs at least one registered patch"));
    }
    if config.batch_size == 0 || config.samples == 0 {
        return Err(Error::input("batch_size and samples must be positive"));
    }
    if !(config.lr >= 0.0) {
        return Err(Error::input(format!("learning rate {} must be non-negative", config.lr)));
    }
    let loss_kind = match data {
        DistillData::TopK { .. } => DistillLoss::Kl,
        DistillData::Features { .. } => DistillLoss::Mse,
    };
    if loss_kind != config.loss {
        return Err(Error::input(format!(
            "configured loss {:?} does not match the supplied training data",
            config.loss
        )));
    }

    // Resolve the sample set once; batches index into it.
    let (count, k) = match &data {
        DistillData::TopK { tokens, cache } => {
            if cache.vocab() != student.vocab_size() {
                return Err(Error::input(format!(
                    "cache vocabulary {} differs from the student's {}",
                    cache.vocab(),
                    student.vocab_size()
                )));
            }
            let windows = tokens.len() / cache.seq_len().max(1);
            let count = config.samples.min(cache.sequences());
            if windows < count {
                return Err(Error::input(format!(
                    "corpus provides {windows} windows but {count} cached sequences are needed"
                )));
            }
            (count, config.k.min(cache.k()))
        }
        DistillData::Features { trace, start, n } => {
            let chain_len = student.patches.get(start).map_or(0, Vec::len);
            if chain_len == 0 || chain_len != student.patch_count() {
                return Err(Error::contract(format!(
                    "feature alignment trains exactly the patches at interface {start}"
                )));
            }
            if start + n > trace.n_layers() {
                return Err(Error::input("trace does not cover the pruned block"));
            }
            (config.samples.min(trace.batch()), 0)
        }
    };
    if k == 0 && loss_kind == DistillLoss::Kl {
        return Err(Error::input("K must be positive"));
    }

    let sizes: Vec<usize> = student.patches_mut().iter().map(|p| p.matrix().numel()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let mut report = DistillReport::default();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for ids in order.chunks(config.batch_size) {
            let (loss, grads) = match &data {
                DistillData::TopK { tokens, cache } => {
                    let windows: Vec<&[u32]> = ids
                        .iter()
                        .map(|&s| &tokens[s * cache.seq_len()..(s + 1) * cache.seq_len()])
                        .collect();
                    let batch = TokenBatch::from_windows(&windows)?;
                    kl_batch(student, &batch, &TopKTargets::from_cache(cache, ids, k))?
                }
                DistillData::Features { trace, start, n } => {
                    let row = trace.seq_len() * trace.hidden_dim();
                    let input = rows_of(trace.entry(*start)?, ids, row);
                    let target = rows_of(trace.entry(start + n)?, ids, row);
                    mse_batch(student, *start, &input, &target)?
                }
            };
            opt.begin_step();
            for (slot, (p, g)) in student.patches_mut().into_iter().zip(&grads).enumerate() {
                let before = config.diag_only.then(|| p.matrix().clone());
                opt.update(slot, p.matrix_mut(), g, config.lr, config.weight_decay > 0.0)?;
                if let Some(before) = before {
                    let c = p.size();
                    let m = p.matrix_mut().data_mut();
                    for (i, (v, b)) in m.iter_mut().zip(before.data()).enumerate() {
                        if i / c != i % c {
                            *v = *b;
                        }
                    }
                }
                p.mark_trained();
            }
            report.step_losses.push(loss);
            epoch_total += loss;
            epoch_steps += 1;
            let step = report.step_losses.len();
            if config.log_every > 0 && step % config.log_every == 0 {
                info!("distill step {step:>5}  loss {loss:.5}");
            }
        }
        let mean = epoch_total / epoch_steps as f64;
        info!("distill epoch {epoch}  mean loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
