//! Trains the default 8-layer byte-level model on the bundled Milton corpus.
//!
//! ```text
//! cargo run --release --example train_toy -- [steps] [out.lpm] [batch]
//! ```

use linearpatch::corpus::{load_corpus, split_holdout};
use linearpatch::eval::perplexity;
use linearpatch::model::{train_toy, ModelConfig, TrainConfig, TransformerModel};

fn main() -> linearpatch::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(1400, |s| s.parse().expect("steps must be an integer"));
    let out = args.next().unwrap_or_else(|| "toy.lpm".to_string());
    let batch_size = args.next().map_or(8, |s| s.parse().expect("batch must be an integer"));

    let tokens = load_corpus(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/milton.txt"))?;
    let (train, held_out) = split_holdout(&tokens, 0.05);
    let mut model = TransformerModel::<f32>::init(ModelConfig::default(), 0)?;
    let cfg = TrainConfig {
        steps,
        batch_size,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let report = train_toy(&mut model, train, &cfg)?;
    println!(
        "{steps} steps in {:.1}s; train ppl {:.2} -> {:.2}",
        start.elapsed().as_secs_f64(),
        report.initial_perplexity().unwrap_or(f64::NAN),
        report.final_perplexity(50).unwrap_or(f64::NAN)
    );
    let eval = &held_out[..held_out.len().min(64 * 256)];
    println!("held-out ppl {:.3}", perplexity(&model, eval, 64)?);
    model.save_checkpoint(&out)?;
    println!("wrote {out} ({})", model.backbone_digest());
    Ok(())
}
