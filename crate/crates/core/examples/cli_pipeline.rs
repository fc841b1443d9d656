//! Drives the command-line front end in-process, end to end, on a small
//! model trained from scratch. Artifacts land in a temporary directory.
//!
//! ```text
//! cargo run --release --example cli_pipeline
//! ```

use linearpatch::cli::run;

fn step(args: &[&str]) {
    println!("$ linearpatch {}", args.join(" "));
    let argv = std::iter::once("linearpatch").chain(args.iter().copied());
    let code = run(argv, &mut std::io::stdout(), &mut std::io::stderr());
    assert_eq!(code, 0, "command failed with exit code {code}");
}

fn main() {
    let dir = std::env::temp_dir().join("linearpatch_cli_pipeline");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let corpus = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/milton.txt");

    step(&[
        "train-toy", "--corpus", corpus, "--layers", "8", "--dim", "32", "--heads", "4", "--seq-len", "32",
        "--steps", "300", "--out", &p("dense.lpm"),
    ]);
    step(&["trace", "--model", &p("dense.lpm"), "--calib", corpus, "--samples", "64", "--out", &p("trace.bin")]);
    step(&["select", "--trace", &p("trace.bin"), "--n", "2", "--out", &p("spec.json")]);
    for v in ["none", "scale-raw", "linearpatch"] {
        step(&[
            "patch", "--model", &p("dense.lpm"), "--trace", &p("trace.bin"), "--spec", &p("spec.json"), "--variant",
            v, "--out", &p(&format!("{v}.lpm")),
        ]);
    }
    step(&["cache-logits", "--teacher", &p("dense.lpm"), "--corpus", corpus, "--samples", "500", "--out", &p("cache.lpl")]);
    step(&[
        "distill", "--model", &p("linearpatch.lpm"), "--cache", &p("cache.lpl"), "--corpus", corpus, "--samples",
        "500", "--lr", "1e-3", "--out", &p("tuned.lpm"),
    ]);
    step(&[
        "eval", "--models", &p("dense.lpm"), &p("none.lpm"), &p("scale-raw.lpm"), &p("linearpatch.lpm"),
        &p("tuned.lpm"), "--corpus", corpus, "--holdout", "0.05",
    ]);
    step(&["analyze", "sigma", "--trace", &p("trace.bin"), "--n", "2"]);
}
