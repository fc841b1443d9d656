//! Channel-scaling statistics, patch fusion and insertion.
//!
//! The patch at a pruning interface is `P = H · diag(d) · Hᵀ`, where `d`
//! re-matches per-channel magnitudes in Hadamard-rotated coordinates. Because
//! `P` is a single `C × C` matrix, applying it costs one GEMM.

use std::fmt;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::hadamard::{build_hadamard, HadamardMatrix};
use crate::model::{HiddenTrace, TransformerModel};
use crate::numerics::{Element, Tensor};
use crate::pruning::{prune_layers, PruneMode, PruneSpec};

/// Denominators below this are treated as dead channels.
pub const SCALE_EPSILON: f64 = 1e-8;

/// Where a fused patch came from: the rotation factorization and the scaling
/// vector. Kept for auditing only; the forward pass uses the matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    /// `(walsh exponent, paley factor)` of `H`, or `None` for a raw diagonal.
    pub rotation: Option<(u32, usize)>,
    pub scale: Vec<f32>,
}

/// A `C × C` matrix applied to the residual stream at an interface.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMatrix<T = f32> {
    matrix: Tensor<T>,
    provenance: Option<Provenance>,
    trained: bool,
}

impl<T: Element> PatchMatrix<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        Self::from_parts(matrix, None, false)
    }

    pub fn identity(c: usize) -> Self {
        PatchMatrix {
            matrix: Tensor::eye(c),
            provenance: None,
            trained: false,
        }
    }

    pub fn from_parts(matrix: Tensor<T>, provenance: Option<Provenance>, trained: bool) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::input(format!("patch matrix must be square, got {s:?}")));
        }
        if let Some(p) = &provenance {
            if p.scale.len() != s[0] {
                return Err(Error::input(format!(
                    "provenance scale has {} entries for a {}-dim patch",
                    p.scale.len(),
                    s[0]
                )));
            }
        }
        matrix.ensure_finite("patch")?;
        Ok(PatchMatrix {
            matrix,
            provenance,
            trained,
        })
    }

    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    /// Mutable access for optimizers.
    pub fn matrix_mut(&mut self) -> &mut Tensor<T> {
        &mut self.matrix
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn trained(&self) -> bool {
        self.trained
    }

    /// Flags the matrix as fine-tuned, which releases the symmetry and
    /// definiteness invariants.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn cast<U: Element>(&self) -> PatchMatrix<U> {
        PatchMatrix {
            matrix: self.matrix.cast(),
            provenance: self.provenance.clone(),
            trained: self.trained,
        }
    }

    /// `max |P - Pᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let c = self.size();
        let mut worst = 0.0f64;
        for i in 0..c {
            for j in i + 1..c {
                let d = (self.matrix.at2(i, j).as_f64() - self.matrix.at2(j, i).as_f64()).abs();
                worst = worst.max(d);
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol
    }

    /// Ascending eigenvalues of the symmetric part `(P + Pᵀ) / 2`.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let c = self.size();
        let m = DMatrix::from_fn(c, c, |i, j| {
            0.5 * (self.matrix.at2(i, j).as_f64() + self.matrix.at2(j, i).as_f64())
        });
        let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

/// Per-channel magnitude ratio `d` between the expected and actual input of
/// the successor layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingVector {
    pub values: Vec<f64>,
    /// Channels whose denominator fell below [`SCALE_EPSILON`] and were set
    /// to 1.
    pub floored: Vec<bool>,
    /// Whether `values` act on Hadamard-rotated coordinates.
    pub rotated: bool,
}

impl ScalingVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn floored_count(&self) -> usize {
        self.floored.iter().filter(|&&f| f).count()
    }
}

fn interface_pair<T: Element>(
    trace: &HiddenTrace<T>,
    start: usize,
    n: usize,
    h: Option<&HadamardMatrix>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if start + n > trace.n_layers() {
        return Err(Error::input(format!(
            "interface [{start}, {}] outside a trace of {} layers",
            start + n,
            trace.n_layers()
        )));
    }
    let c = trace.hidden_dim();
    let x_in: Tensor<f64> = trace.entry(start)?.cast();
    let x_out: Tensor<f64> = trace.entry(start + n)?.cast();
    match h {
        Some(h) if h.size() != c => Err(Error::input(format!(
            "Hadamard size {} does not match hidden dimension {c}",
            h.size()
        ))),
        Some(h) => Ok((h.rotate(&x_in)?, h.rotate(&x_out)?)),
        None => Ok((x_in, x_out)),
    }
}

/// `d_k = mean|X^(start+n)_{:,k}| / mean|X^(start)_{:,k}|`, pooling every
/// sample and token. With `h`, both activations are rotated first.
pub fn channel_scaling<T: Element>(
    trace: &HiddenTrace<T>,
    start: usize,
    n: usize,
    h: Option<&HadamardMatrix>,
) -> Result<ScalingVector> {
    let (x_in, x_out) = interface_pair(trace, start, n, h)?;
    let c = trace.hidden_dim();
    let rows = x_in.leading();
    let mut num = vec![0.0f64; c];
    let mut den = vec![0.0f64; c];
    for r in 0..rows {
        let a = &x_in.data()[r * c..(r + 1) * c];
        let b = &x_out.data()[r * c..(r + 1) * c];
        for k in 0..c {
            den[k] += a[k].abs();
            num[k] += b[k].abs();
        }
    }
    let mut values = Vec::with_capacity(c);
    let mut floored = Vec::with_capacity(c);
    for k in 0..c {
        let (mean_in, mean_out) = (den[k] / rows as f64, num[k] / rows as f64);
        if mean_in < SCALE_EPSILON {
            values.push(1.0);
            floored.push(true);
        } else {
            values.push(mean_out / mean_in);
            floored.push(false);
        }
    }
    Ok(ScalingVector {
        values,
        floored,
        rotated: h.is_some(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub sigma: f64,
    /// `(sample, channel)` pairs with no usable token.
    pub skipped: usize,
}

/// Mean over samples and channels of the population standard deviation of
/// the token-wise ratios `|out| / |in|`. Tokens whose input magnitude is
/// below [`SCALE_EPSILON`] are left out of their channel's statistic.
pub fn sigma_d<T: Element>(
    trace: &HiddenTrace<T>,
    start: usize,
    n: usize,
    h: Option<&HadamardMatrix>,
) -> Result<SigmaReport> {
    let (x_in, x_out) = interface_pair(trace, start, n, h)?;
    let (b, l, c) = (trace.batch(), trace.seq_len(), trace.hidden_dim());
    let (a, o) = (x_in.data(), x_out.data());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut ratios = Vec::with_capacity(l);
    for i in 0..b {
        for k in 0..c {
            ratios.clear();
            for t in 0..l {
                let idx = (i * l + t) * c + k;
                let den = a[idx].abs();
                if den >= SCALE_EPSILON {
                    ratios.push(o[idx].abs() / den);
                }
            }
            if ratios.is_empty() {
                skipped += 1;
                continue;
            }
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / ratios.len() as f64;
            total += var.sqrt();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::input("every channel was excluded from the statistic"));
    }
    if skipped > 0 {
        warn!("sigma_d skipped {skipped} sample/channel pairs with vanishing input");
    }
    Ok(SigmaReport {
        sigma: total / used as f64,
        skipped,
    })
}

fn check_scale(d: &[f64], c: usize) -> Result<()> {
    if d.len() != c {
        return Err(Error::input(format!("scaling vector has {} entries, expected {c}", d.len())));
    }
    if let Some((k, v)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::contract(format!("scaling entry {k} is {v}, must be positive")));
    }
    Ok(())
}

/// `P = H · diag(d) · Hᵀ`, formed in 64-bit and stored as `T`.
pub fn fuse_patch<T: Element>(h: &HadamardMatrix, d: &[f64]) -> Result<PatchMatrix<T>> {
    let c = h.size();
    check_scale(d, c)?;
    let hm = h.matrix();
    let mut p = vec![0.0f64; c * c];
    for i in 0..c {
        for j in i..c {
            let v: f64 = (0..c).map(|k| hm.at2(i, k) * d[k] * hm.at2(j, k)).sum();
            p[i * c + j] = v;
            p[j * c + i] = v;
        }
    }
    PatchMatrix::from_parts(
        Tensor::new([c, c], p)?.cast(),
        Some(Provenance {
            rotation: Some(h.factorization()),
            scale: d.iter().map(|&v| v as f32).collect(),
        }),
        false,
    )
}

/// `P = alpha · diag(d)` acting on raw channels.
pub fn scale_patch<T: Element>(d: &[f64], alpha: f64) -> Result<PatchMatrix<T>> {
    if !(alpha > 0.0) {
        return Err(Error::input(format!("alpha must be positive, got {alpha}")));
    }
    check_scale(d, d.len())?;
    let scaled: Vec<f64> = d.iter().map(|v| alpha * v).collect();
    PatchMatrix::from_parts(
        Tensor::from_diag(&scaled).cast(),
        Some(Provenance {
            rotation: None,
            scale: scaled.iter().map(|&v| v as f32).collect(),
        }),
        false,
    )
}

fn check_slot<T: Element>(model: &TransformerModel<T>, slot: usize, p: &PatchMatrix<T>) -> Result<()> {
    if p.size() != model.hidden_dim() {
        return Err(Error::input(format!(
            "patch is {0}x{0} but the model's hidden dimension is {1}",
            p.size(),
            model.hidden_dim()
        )));
    }
    if slot > model.n_layers() {
        return Err(Error::input(format!(
            "interface {slot} is beyond the pruned depth {}",
            model.n_layers()
        )));
    }
    Ok(())
}

/// Registers `p` in front of layer `slot` (`slot == n_layers` means in front
/// of the final norm).
pub fn insert_patch<T: Element>(
    mut model: TransformerModel<T>,
    slot: usize,
    p: PatchMatrix<T>,
) -> Result<TransformerModel<T>> {
    check_slot(&model, slot, &p)?;
    if model.patches.contains_key(&slot) {
        return Err(Error::contract(format!("interface {slot} already has a patch")));
    }
    model.patches.insert(slot, vec![p]);
    Ok(model)
}

/// Appends `p` to the chain at `slot`. Adjacent removed layers share an
/// interface, so each gets its own matrix applied in order.
pub fn chain_patch<T: Element>(
    mut model: TransformerModel<T>,
    slot: usize,
    p: PatchMatrix<T>,
) -> Result<TransformerModel<T>> {
    check_slot(&model, slot, &p)?;
    model.patches.entry(slot).or_default().push(p);
    Ok(model)
}

/// What to place at each pruning interface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PatchVariant {
    /// No patch: vanilla pruning.
    None,
    /// Raw-channel diagonal scaling.
    ScaleRaw,
    /// Rotated scaling fused into `H diag(d) Hᵀ`.
    Linearpatch,
}

impl fmt::Display for PatchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchVariant::None => "none",
            PatchVariant::ScaleRaw => "scale-raw",
            PatchVariant::Linearpatch => "linearpatch",
        })
    }
}

/// The patch for one removed span `[start, start+n)` of the dense model.
pub fn interface_patch<T: Element>(
    trace: &HiddenTrace<T>,
    start: usize,
    n: usize,
    variant: PatchVariant,
) -> Result<Option<PatchMatrix<T>>> {
    match variant {
        PatchVariant::None => Ok(None),
        PatchVariant::ScaleRaw => {
            let d = channel_scaling(trace, start, n, None)?;
            scale_patch(&d.values, 1.0).map(Some)
        }
        PatchVariant::Linearpatch => {
            let h = build_hadamard(trace.hidden_dim())?;
            let d = channel_scaling(trace, start, n, Some(&h))?;
            fuse_patch(&h, &d.values).map(Some)
        }
    }
}

/// Prunes `dense` by `spec` and patches every interface, using the dense
/// model's calibration `trace`.
///
/// A contiguous block gets one patch. Other modes get one patch per removed
/// layer, chained when removed layers are adjacent.
pub fn build_variant<T: Element>(
    dense: &TransformerModel<T>,
    trace: &HiddenTrace<T>,
    spec: &PruneSpec,
    variant: PatchVariant,
) -> Result<TransformerModel<T>> {
    if trace.n_layers() != dense.n_layers() || trace.hidden_dim() != dense.hidden_dim() {
        return Err(Error::input(format!(
            "trace covers {} layers of width {}, model has {} of width {}",
            trace.n_layers(),
            trace.hidden_dim(),
            dense.n_layers(),
            dense.hidden_dim()
        )));
    }
    let mut model = prune_layers(dense, spec)?;
    if spec.selected.is_empty() {
        return Ok(model);
    }
    if spec.mode == PruneMode::ContiguousCosine {
        let start = spec.block_start.expect("validated contiguous spec");
        if let Some(p) = interface_patch(trace, start, spec.n, variant)? {
            model = insert_patch(model, start, p)?;
        }
        return Ok(model);
    }
    for (removed, slot) in spec.interface_slots() {
        if let Some(p) = interface_patch(trace, removed, 1, variant)? {
            model = chain_patch(model, slot, p)?;
        }
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub perplexity: f64,
}

/// Perplexity of `pruned` with `X ↦ alpha · (X ⊙ d)` at `slot`.
pub fn alpha_perplexity<T: Element>(
    pruned: &TransformerModel<T>,
    slot: usize,
    d: &[f64],
    alpha: f64,
    tokens: &[u32],
    seq_len: usize,
) -> Result<f64> {
    let patched = insert_patch(pruned.clone(), slot, scale_patch(d, alpha)?)?;
    eval::perplexity(&patched, tokens, seq_len)
}

/// [`alpha_perplexity`] for each value in `alphas`.
pub fn alpha_sweep<T: Element>(
    pruned: &TransformerModel<T>,
    slot: usize,
    d: &[f64],
    alphas: &[f64],
    tokens: &[u32],
    seq_len: usize,
) -> Result<Vec<AlphaRow>> {
    alphas
        .iter()
        .map(|&alpha| {
            Ok(AlphaRow {
                alpha,
                perplexity: alpha_perplexity(pruned, slot, d, alpha, tokens, seq_len)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    pub layer: usize,
    pub channel: usize,
    pub mean_abs: f64,
}

/// Mean absolute activation of every channel at every traced layer input.
pub fn channel_magnitudes<T: Element>(trace: &HiddenTrace<T>) -> Vec<MagnitudeRow> {
    let c = trace.hidden_dim();
    let mut rows = Vec::with_capacity(trace.entries().len() * c);
    for (layer, e) in trace.entries().iter().enumerate() {
        let mut sums = vec![0.0f64; c];
        for chunk in e.data().chunks_exact(c) {
            for (s, v) in sums.iter_mut().zip(chunk) {
                *s += v.as_f64().abs();
            }
        }
        let count = e.leading() as f64;
        rows.extend(sums.into_iter().enumerate().map(|(channel, s)| MagnitudeRow {
            layer,
            channel,
            mean_abs: s / count,
        }));
    }
    rows
}

/// Interface statistics for one removed block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub start: usize,
    pub n: usize,
    pub sigma_raw: SigmaReport,
    pub sigma_rotated: SigmaReport,
    /// Mean |activation| per channel entering the block.
    pub input_profile: Vec<f64>,
    /// Mean |activation| per channel leaving the block.
    pub output_profile: Vec<f64>,
    pub alpha: Vec<AlphaRow>,
}

pub fn diagnose<T: Element>(trace: &HiddenTrace<T>, start: usize, n: usize) -> Result<DiagnosticsReport> {
    let h = build_hadamard(trace.hidden_dim())?;
    let sigma_raw = sigma_d(trace, start, n, None)?;
    let sigma_rotated = sigma_d(trace, start, n, Some(&h))?;
    let mags = channel_magnitudes(trace);
    let c = trace.hidden_dim();
    let profile = |layer: usize| mags[layer * c..(layer + 1) * c].iter().map(|r| r.mean_abs).collect();
    Ok(DiagnosticsReport {
        start,
        n,
        sigma_raw,
        sigma_rotated,
        input_profile: profile(start),
        output_profile: profile(start + n),
        alpha: Vec::new(),
    })
}
