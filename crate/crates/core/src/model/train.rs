use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Trainable, TransformerModel};
use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Tape, Tensor};

/// Hyperparameters of the toy language-model trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            seq_len: 64,
            lr: 3e-3,
            warmup: 50,
            weight_decay: 0.01,
            grad_clip: Some(1.0),
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy (nats/token) of every step's batch.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_perplexity(&self) -> Option<f64> {
        self.losses.first().map(|l| l.exp())
    }

    /// Perplexity over the mean of the last `window` step losses.
    pub fn final_perplexity(&self, window: usize) -> Option<f64> {
        let n = window.min(self.losses.len());
        (n > 0).then(|| {
            let tail = &self.losses[self.losses.len() - n..];
            (tail.iter().sum::<f64>() / n as f64).exp()
        })
    }
}

/// Draws `batch` random `(input, target)` windows from `corpus`.
fn sample_batch(
    corpus: &[u32],
    batch: usize,
    seq_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenBatch, Vec<usize>)> {
    let span = corpus.len() - seq_len;
    let mut inputs = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    for _ in 0..batch {
        let s = rng.random_range(0..span);
        inputs.extend_from_slice(&corpus[s..s + seq_len]);
        targets.extend(corpus[s + 1..s + seq_len + 1].iter().map(|&t| t as usize));
    }
    Ok((TokenBatch::new(inputs, batch, seq_len)?, targets))
}

/// Trains every backbone weight with next-token cross-entropy.
///
/// Steps draw random windows with a generator seeded from `config.seed`,
/// so identical inputs give identical weights.
pub fn train_toy(
    model: &mut TransformerModel<f32>,
    corpus: &[u32],
    config: &TrainConfig,
) -> Result<TrainReport> {
    let seq = config.seq_len;
    if seq == 0 || seq > model.config.max_seq_len {
        return Err(Error::input(format!(
            "training seq_len {seq} must be in 1..={}",
            model.config.max_seq_len
        )));
    }
    if corpus.len() < 100 * seq {
        return Err(Error::input(format!(
            "corpus has {} tokens; training needs at least {}",
            corpus.len(),
            100 * seq
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::input("batch_size must be positive"));
    }
    if !model.patches.is_empty() {
        return Err(Error::contract("train_toy expects a model without patch slots"));
    }
    let sizes: Vec<usize> = model.weights().iter().map(|(_, t)| t.numel()).collect();
    let decays: Vec<bool> = model.weights().iter().map(|(_, t)| t.rank() == 2).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let (tokens, targets) = sample_batch(corpus, config.batch_size, seq, &mut rng)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::Backbone);
        let fwd = model.forward_on_tape(&mut tape, &bound, &tokens)?;
        let loss = tape.cross_entropy(fwd.logits, &targets)?;
        let loss_value = tape.value(loss).item()? as f64;
        let mut grads = tape.backward(loss)?;
        let mut gs: Vec<Tensor<f32>> = bound
            .backbone_vars()
            .into_iter()
            .map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
            })
            .collect();
        if let Some(max) = config.grad_clip {
            clip_grad_norm(&mut gs, max);
        }
        let lr = cosine_lr(step, config.steps, config.warmup, config.lr);
        opt.begin_step();
        for (slot, (param, grad)) in model.weights_mut().into_iter().zip(&gs).enumerate() {
            opt.update(slot, param, grad, lr, decays[slot])?;
        }
        report.losses.push(loss_value);
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps) {
            info!("step {step:>5}  loss {loss_value:.4}  lr {lr:.2e}");
        }
    }
    Ok(report)
}
