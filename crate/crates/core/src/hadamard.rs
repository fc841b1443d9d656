//! Orthonormal Hadamard matrices.
//!
//! Power-of-two sizes come from the Sylvester recursion
//! `H_{2^n} = H_2 ⊗ H_{2^{n-1}}`. Other sizes `C = 2^a · m` are built as
//! `H_{2^a} ⊗ H_m`, where the `m × m` factor is a Paley type-I matrix
//! (available whenever `m - 1` is a prime congruent to 3 mod 4).

use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Largest Walsh exponent accepted by [`walsh_hadamard`].
pub const MAX_WALSH_EXPONENT: u32 = 16;

/// A dense orthonormal `C × C` Hadamard matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HadamardMatrix {
    size: usize,
    walsh_exponent: u32,
    paley_factor: usize,
    matrix: Tensor<f64>,
}

impl HadamardMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    /// `(a, m)` with `size == 2^a * m`; `m == 1` for pure Walsh matrices.
    pub fn factorization(&self) -> (u32, usize) {
        (self.walsh_exponent, self.paley_factor)
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.matrix
    }

    pub fn matrix_as<T: Element>(&self) -> Tensor<T> {
        self.matrix.cast()
    }

    /// Rotates the rows of `x` (`[.., C]`): returns `x · H`.
    pub fn rotate<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.matrix_as())
    }

    /// Inverse rotation `x · Hᵀ`.
    pub fn unrotate<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.matrix.transpose()?.cast())
    }
}

fn kron(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (rows, cols) = (ar * br, ac * bc);
    let mut out = vec![0.0; rows * cols];
    for i in 0..ar {
        for j in 0..ac {
            let s = a.at2(i, j);
            for k in 0..br {
                let row = (i * br + k) * cols + j * bc;
                for l in 0..bc {
                    out[row + l] = s * b.at2(k, l);
                }
            }
        }
    }
    Tensor::new([rows, cols], out).expect("kron dims")
}

/// Normalized Walsh-Hadamard matrix of size `2^n`.
pub fn walsh_hadamard(n: u32) -> Result<HadamardMatrix> {
    if n > MAX_WALSH_EXPONENT {
        return Err(Error::input(format!(
            "Walsh-Hadamard size 2^{n} exceeds the 2^{MAX_WALSH_EXPONENT} limit"
        )));
    }
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let h2 = Tensor::new([2, 2], vec![r, r, r, -r])?;
    let mut h = Tensor::ones([1, 1]);
    for _ in 0..n {
        h = kron(&h2, &h);
    }
    Ok(HadamardMatrix {
        size: 1 << n,
        walsh_exponent: n,
        paley_factor: 1,
        matrix: h,
    })
}

fn is_prime(q: usize) -> bool {
    if q < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= q {
        if q % d == 0 {
            return false;
        }
        d += 1;
    }
    true
}

/// Whether a Paley type-I matrix of order `m` exists (`m - 1` prime, `≡ 3 mod 4`).
pub fn paley_supported(m: usize) -> bool {
    m >= 4 && is_prime(m - 1) && (m - 1) % 4 == 3
}

/// Paley-I orders up to `limit`.
pub fn supported_paley_sizes(limit: usize) -> Vec<usize> {
    (4..=limit).filter(|&m| paley_supported(m)).collect()
}

/// Unnormalized ±1 Hadamard matrix of order `m` (row-major), satisfying
/// `MᵀM = m·I` exactly.
pub fn paley_hadamard(m: usize) -> Result<Vec<i32>> {
    if !paley_supported(m) {
        return Err(Error::input(format!(
            "no Paley-I Hadamard matrix of order {m}; supported orders up to 100: {:?}",
            supported_paley_sizes(100)
        )));
    }
    let q = m - 1;
    let mut residue = vec![false; q];
    for x in 1..q {
        residue[x * x % q] = true;
    }
    let chi = |a: usize| -> i32 {
        if a == 0 {
            0
        } else if residue[a] {
            1
        } else {
            -1
        }
    };
    // H = I + S with S = [[0, 1ᵀ], [-1, Q]] skew-symmetric, Q_ij = χ(j - i).
    let mut h = vec![0i32; m * m];
    for i in 0..m {
        for j in 0..m {
            let s = match (i, j) {
                (0, 0) => 0,
                (0, _) => 1,
                (_, 0) => -1,
                _ => chi((j + q - i) % q),
            };
            h[i * m + j] = s + i32::from(i == j);
        }
    }
    Ok(h)
}

/// Splits `c` as `2^a · m` with `m` either 1 or a Paley order, preferring the
/// largest `a`.
pub fn factorize(c: usize) -> Option<(u32, usize)> {
    if c == 0 {
        return None;
    }
    let max_a = c.trailing_zeros();
    (0..=max_a).rev().find_map(|a| {
        let m = c >> a;
        (m == 1 || paley_supported(m)).then_some((a, m))
    })
}

/// Orthonormal Hadamard matrix for hidden size `c`.
pub fn build_hadamard(c: usize) -> Result<HadamardMatrix> {
    let (a, m) = factorize(c).ok_or_else(|| {
        Error::input(format!(
            "hidden size {c} is not 2^a·m with m = 1 or a Paley order {:?}",
            supported_paley_sizes(100)
        ))
    })?;
    let walsh = walsh_hadamard(a)?;
    if m == 1 {
        return Ok(walsh);
    }
    let inv = 1.0 / (m as f64).sqrt();
    let factor = Tensor::new(
        [m, m],
        paley_hadamard(m)?.into_iter().map(|v| v as f64 * inv).collect(),
    )?;
    Ok(HadamardMatrix {
        size: c,
        walsh_exponent: a,
        paley_factor: m,
        matrix: kron(walsh.matrix(), &factor),
    })
}
