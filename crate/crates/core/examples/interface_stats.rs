//! Interface statistics of a trained checkpoint: block cosines, the scaling
//! vector `d`, raw versus rotated spread, and an alpha sweep.
//!
//! ```text
//! cargo run --release --example interface_stats -- toy.lpm [n]
//! ```

use linearpatch::corpus::{load_corpus, sample_windows, split_holdout};
use linearpatch::hadamard::build_hadamard;
use linearpatch::model::{HiddenTrace, TransformerModel};
use linearpatch::patch::{alpha_sweep, channel_scaling, sigma_d};
use linearpatch::pruning::{prune_layers, select_prune_block};

fn summary(v: &[f64]) -> String {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    format!(
        "min {:.3}  median {:.3}  max {:.3}  mean {:.3}",
        s[0],
        s[s.len() / 2],
        s[s.len() - 1],
        mean
    )
}

fn main() -> linearpatch::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.first().map_or("toy.lpm", String::as_str);
    let n = args.get(1).map_or(2, |s| s.parse().expect("n"));

    let dense = TransformerModel::<f32>::load_checkpoint(ckpt)?;
    let seq = dense.config.max_seq_len;
    let tokens = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/milton.txt"))?;
    let (train, held_out) = split_holdout(&tokens, 0.05);
    let trace = HiddenTrace::collect(&dense, &sample_windows(train, seq, 128, 1)?, 16)?;
    let h = build_hadamard(dense.hidden_dim())?;

    let rms: Vec<f64> = trace
        .entries()
        .iter()
        .map(|e| (e.data().iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / e.numel() as f64).sqrt())
        .collect();
    println!("residual rms per layer input: {rms:.3?}");

    let spec = select_prune_block(&trace, n)?;
    for c in &spec.candidates {
        println!("block {} score {:.5}", c.layer, c.score);
    }
    let start = spec.block_start.expect("n > 0");
    let raw = channel_scaling(&trace, start, n, None)?;
    let rot = channel_scaling(&trace, start, n, Some(&h))?;
    println!("d raw:     {}", summary(&raw.values));
    println!("d rotated: {}", summary(&rot.values));
    println!(
        "sigma_d raw {:.4}  rotated {:.4}",
        sigma_d(&trace, start, n, None)?.sigma,
        sigma_d(&trace, start, n, Some(&h))?.sigma
    );

    let pruned = prune_layers(&dense, &spec)?;
    let eval = &held_out[..held_out.len().min(seq * 200)];
    for row in alpha_sweep(&pruned, start, &raw.values, &[0.5, 0.8, 1.0, 1.2, 1.5], eval, seq)? {
        println!("alpha {:.2}  ppl {:.4}", row.alpha, row.perplexity);
    }
    Ok(())
}
