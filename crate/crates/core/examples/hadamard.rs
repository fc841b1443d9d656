//! Hadamard construction and patch fusion.
//!
//! Shows how each width is factorized, checks orthogonality, and confirms
//! that the fused patch is symmetric with the scaling vector as its spectrum.
//!
//! ```text
//! cargo run --release --example hadamard
//! ```

use linearpatch::hadamard::build_hadamard;
use linearpatch::numerics::Tensor;
use linearpatch::patch::fuse_patch;

fn main() -> linearpatch::Result<()> {
    println!("{:>5} {:>12} {:>12}", "C", "factors", "max|HᵀH−I|");
    for c in [8, 12, 20, 64, 96, 128, 192] {
        let h = build_hadamard(c)?;
        let (a, m) = h.factorization();
        let gram = h.matrix().transpose()?.matmul(h.matrix())?;
        let err = gram.max_abs_diff(&Tensor::eye(c))?;
        println!("{c:>5} {:>12} {err:>12.2e}", format!("2^{a} x {m}"));
    }

    let h = build_hadamard(12)?;
    let d: Vec<f64> = (0..12).map(|k| 0.5 + 0.1 * k as f64).collect();
    let p = fuse_patch::<f64>(&h, &d)?;
    println!("\nC=12 patch: asymmetry {:.1e}", p.asymmetry());
    println!("eigenvalues {:.3?}", p.eigenvalues());
    Ok(())
}
