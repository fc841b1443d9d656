//! Teacher caching and the two distillation losses on a checkpoint.
//!
//! Writes a top-K cache, reports its size against full-vocabulary storage,
//! then tunes the patch once with KL and once with the feature MSE.
//!
//! ```text
//! cargo run --release --example distill_cache -- toy.lpm [samples]
//! ```

use linearpatch::corpus::{load_corpus, sample_windows, split_holdout};
use linearpatch::distill::{cache_teacher_logits, distill_patch, DistillConfig, DistillData, DistillLoss, LogitsCache};
use linearpatch::eval::perplexity;
use linearpatch::model::{HiddenTrace, TransformerModel};
use linearpatch::patch::{build_variant, PatchVariant};
use linearpatch::pruning::select_prune_block;

fn main() -> linearpatch::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.first().map_or("toy.lpm", String::as_str);
    let samples = args.get(1).map_or(500, |s| s.parse().expect("samples"));

    let dense = TransformerModel::<f32>::load_checkpoint(ckpt)?;
    let seq = dense.config.max_seq_len;
    let tokens = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/milton.txt"))?;
    let (train, held_out) = split_holdout(&tokens, 0.05);
    let held_out = &held_out[..held_out.len().min(200 * seq)];

    let trace = HiddenTrace::collect(&dense, &sample_windows(train, seq, 128, 1)?, 16)?;
    let spec = select_prune_block(&trace, 2)?;
    let patched = build_variant(&dense, &trace, &spec, PatchVariant::Linearpatch)?;

    let k = 100.min(dense.vocab_size());
    let cache = cache_teacher_logits(&dense, train, seq, k, Some(samples))?;
    let path = std::env::temp_dir().join("distill_cache_example.lpl");
    cache.save(&path)?;
    let on_disk = LogitsCache::load(&path)?;
    println!(
        "cache: {} positions, {} bytes per position (full vocabulary would take {})",
        on_disk.positions(),
        on_disk.position_bytes(),
        dense.vocab_size() * 8
    );

    println!("+P ppl {:.4}", perplexity(&patched, held_out, seq)?);
    let base = DistillConfig {
        k,
        samples,
        lr: 1e-3,
        log_every: 0,
        ..DistillConfig::default()
    };

    let mut kl = patched.clone();
    distill_patch(&mut kl, DistillData::TopK { tokens: train, cache: &on_disk }, &base)?;
    println!("kl-tuned ppl {:.4}", perplexity(&kl, held_out, seq)?);

    let mut mse = patched.clone();
    let start = spec.block_start.expect("contiguous spec");
    let data = DistillData::Features { trace: &trace, start, n: spec.n };
    distill_patch(&mut mse, data, &DistillConfig { loss: DistillLoss::Mse, ..base })?;
    println!("mse-tuned ppl {:.4}", perplexity(&mse, held_out, seq)?);
    Ok(())
}
