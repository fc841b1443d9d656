//! Compares the three pruning selectors on a checkpoint.
//!
//! ```text
//! cargo run --release --example select_prune -- toy.lpm [n]
//! ```

use linearpatch::corpus::{load_corpus, sample_windows, split_holdout};
use linearpatch::eval::perplexity;
use linearpatch::model::{HiddenTrace, TransformerModel};
use linearpatch::pruning::{cosine_block_score, prune_layers, select_noncontiguous, select_ppl_greedy, select_prune_block};

fn main() -> linearpatch::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.first().map_or("toy.lpm", String::as_str);
    let n = args.get(1).map_or(2, |s| s.parse().expect("n"));

    let dense = TransformerModel::<f32>::load_checkpoint(ckpt)?;
    let seq = dense.config.max_seq_len;
    let tokens = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/milton.txt"))?;
    let (train, held_out) = split_holdout(&tokens, 0.05);
    let held_out = &held_out[..held_out.len().min(100 * seq)];
    let trace = HiddenTrace::collect(&dense, &sample_windows(train, seq, 128, 1)?, 16)?;

    println!("block cosines for n={n}:");
    for start in 0..=dense.n_layers() - n {
        println!("  [{start}, {}) {:.4}", start + n, cosine_block_score(&trace, start, n)?);
    }

    let greedy_eval = &train[..train.len().min(32 * seq)];
    let specs = [
        select_prune_block(&trace, n)?,
        select_noncontiguous(&trace, n)?,
        select_ppl_greedy(&dense, greedy_eval, n, seq)?,
    ];
    println!("dense ppl {:.4}", perplexity(&dense, held_out, seq)?);
    for spec in &specs {
        let pruned = prune_layers(&dense, spec)?;
        println!(
            "{:<22} removes {:?}, ppl {:.4}",
            spec.mode.as_str(),
            spec.selected,
            perplexity(&pruned, held_out, seq)?
        );
    }
    Ok(())
}
