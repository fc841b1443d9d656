//! The vanilla / +d / +P / +FT ladder on a trained toy checkpoint.
//!
//! ```text
//! cargo run --release --example train_toy -- 3000 toy.lpm
//! cargo run --release --example ladder -- toy.lpm [samples] [batch] [lr]
//! ```

use std::time::Instant;

use linearpatch::corpus::{load_corpus, sample_windows, split_holdout};
use linearpatch::distill::{cache_teacher_logits, distill_patch, DistillConfig, DistillData};
use linearpatch::eval::{compare_variants, render_table};
use linearpatch::model::{HiddenTrace, TransformerModel};
use linearpatch::patch::{build_variant, PatchVariant};
use linearpatch::pruning::select_prune_block;

fn main() -> linearpatch::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = args.first().map_or("toy.lpm", String::as_str);
    let samples = args.get(1).map_or(5000, |s| s.parse().expect("samples"));
    let batch = args.get(2).map_or(4, |s| s.parse().expect("batch"));
    let lr = args.get(3).map_or(1e-4, |s| s.parse().expect("lr"));

    let dense = TransformerModel::<f32>::load_checkpoint(ckpt)?;
    let seq = dense.config.max_seq_len;
    let tokens = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/milton.txt"))?;
    let (train, held_out) = split_holdout(&tokens, 0.05);

    let calib = sample_windows(train, seq, 128, 1)?;
    let trace = HiddenTrace::collect(&dense, &calib, 16)?;
    let spec = select_prune_block(&trace, 2)?;
    println!("pruning block {:?}", spec.selected);

    let vanilla = build_variant(&dense, &trace, &spec, PatchVariant::None)?;
    let scaled = build_variant(&dense, &trace, &spec, PatchVariant::ScaleRaw)?;
    let patched = build_variant(&dense, &trace, &spec, PatchVariant::Linearpatch)?;

    let t = Instant::now();
    let k = 100.min(dense.vocab_size());
    let cache = cache_teacher_logits(&dense, train, seq, k, Some(samples))?;
    println!("cached {} sequences in {:.1}s", cache.sequences(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut tuned = patched.clone();
    let cfg = DistillConfig {
        samples,
        batch_size: batch,
        lr,
        ..DistillConfig::default()
    };
    let report = distill_patch(&mut tuned, DistillData::TopK { tokens: train, cache: &cache }, &cfg)?;
    println!(
        "distilled in {:.1}s, epoch loss {:.4}",
        t.elapsed().as_secs_f64(),
        report.epoch_losses[0]
    );

    let rows = compare_variants(
        &dense,
        &[
            ("vanilla".to_string(), &vanilla),
            ("+d".to_string(), &scaled),
            ("+P".to_string(), &patched),
            ("+FT".to_string(), &tuned),
        ],
        held_out,
        seq,
    )?;
    print!("{}", render_table(&rows));
    Ok(())
}
