//! Perplexity and retained-performance reporting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{self, TokenBatch};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::Element;

/// Windows evaluated per forward pass.
pub const DEFAULT_EVAL_BATCH: usize = 16;

/// Summed next-token negative log-likelihood (nats) and the number of
/// predicted positions for one batch of windows.
pub fn batch_nll<T: Element>(model: &TransformerModel<T>, tokens: &TokenBatch) -> Result<(f64, usize)> {
    let logits = model.forward(tokens)?;
    let v = model.vocab_size();
    let (b, l) = (tokens.batch(), tokens.seq_len());
    let data = logits.data();
    let mut total = 0.0f64;
    for bi in 0..b {
        let row = tokens.row(bi);
        for t in 0..l.saturating_sub(1) {
            let z = &data[(bi * l + t) * v..(bi * l + t + 1) * v];
            let max = z.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = z.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - z[row[t + 1] as usize].as_f64();
        }
    }
    Ok((total, b * l.saturating_sub(1)))
}

/// Perplexity over non-overlapping windows of `seq_len` tokens; each window
/// contributes its `seq_len - 1` next-token predictions.
pub fn perplexity_batched<T: Element>(
    model: &TransformerModel<T>,
    tokens: &[u32],
    seq_len: usize,
    batch_size: usize,
) -> Result<f64> {
    let (nll, count) = corpus_nll(model, tokens, seq_len, batch_size)?;
    Ok((nll / count as f64).exp())
}

pub fn perplexity<T: Element>(model: &TransformerModel<T>, tokens: &[u32], seq_len: usize) -> Result<f64> {
    perplexity_batched(model, tokens, seq_len, DEFAULT_EVAL_BATCH)
}

fn corpus_nll<T: Element>(
    model: &TransformerModel<T>,
    tokens: &[u32],
    seq_len: usize,
    batch_size: usize,
) -> Result<(f64, usize)> {
    if seq_len < 2 {
        return Err(Error::input("evaluation seq_len must be at least 2"));
    }
    let windows = corpus::windows(tokens, seq_len, None);
    if windows.is_empty() {
        return Err(Error::input(format!(
            "corpus of {} tokens holds no full window of {seq_len}",
            tokens.len()
        )));
    }
    let mut nll = 0.0;
    let mut count = 0;
    for batch in corpus::batches(&windows, batch_size)? {
        let (s, n) = batch_nll(model, &batch)?;
        nll += s;
        count += n;
    }
    Ok((nll, count))
}

/// One row of a variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub perplexity: f64,
    pub tokens: usize,
    /// Dense perplexity divided by this variant's (1.0 for the dense model).
    pub retained: f64,
}

/// Evaluates `dense` and every variant on the same windows.
pub fn compare_variants<T: Element>(
    dense: &TransformerModel<T>,
    variants: &[(String, &TransformerModel<T>)],
    tokens: &[u32],
    seq_len: usize,
) -> Result<Vec<EvalReport>> {
    for (label, m) in variants {
        if m.vocab_size() != dense.vocab_size() {
            return Err(Error::input(format!(
                "variant {label} has vocabulary {} but the dense model has {}",
                m.vocab_size(),
                dense.vocab_size()
            )));
        }
    }
    let (dense_nll, count) = corpus_nll(dense, tokens, seq_len, DEFAULT_EVAL_BATCH)?;
    let dense_ppl = (dense_nll / count as f64).exp();
    let mut rows = vec![EvalReport {
        label: "dense".to_string(),
        perplexity: dense_ppl,
        tokens: count,
        retained: 1.0,
    }];
    for (label, m) in variants {
        let (nll, n) = corpus_nll(*m, tokens, seq_len, DEFAULT_EVAL_BATCH)?;
        let ppl = (nll / n as f64).exp();
        rows.push(EvalReport {
            label: label.clone(),
            perplexity: ppl,
            tokens: n,
            retained: dense_ppl / ppl,
        });
    }
    Ok(rows)
}

/// Aligned plain-text table of `rows`.
pub fn render_table(rows: &[EvalReport]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(7);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>12}  {:>9}  {:>8}", "variant", "perplexity", "tokens", "RP");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>12.4}  {:>9}  {:>7.2}%",
            r.label,
            r.perplexity,
            r.tokens,
            100.0 * r.retained
        );
    }
    out
}
