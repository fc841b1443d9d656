//! Layer-importance scoring and layer removal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::model::{HiddenTrace, TransformerModel};
use crate::numerics::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMode {
    /// One block of `n` adjacent layers, chosen by input/output cosine.
    ContiguousCosine,
    /// The `n` individually most redundant layers by single-layer cosine.
    NoncontiguousCosine,
    /// `n` greedy rounds, each removing the layer that hurts perplexity least.
    PplGreedy,
}

impl PruneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMode::ContiguousCosine => "contiguous-cosine",
            PruneMode::NoncontiguousCosine => "noncontiguous-cosine",
            PruneMode::PplGreedy => "ppl-greedy",
        }
    }
}

/// A scored candidate considered during selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Greedy round (always 0 for the cosine modes).
    pub round: usize,
    /// Block start (contiguous) or layer index (other modes).
    pub layer: usize,
    /// Cosine similarity, or perplexity for `ppl-greedy`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub mode: PruneMode,
    pub n: usize,
    /// Removed layer indices, ascending, in the original model's numbering.
    pub selected: Vec<usize>,
    /// First removed layer in contiguous mode.
    pub block_start: Option<usize>,
    /// Depth of the model the spec was computed for.
    pub source_layers: usize,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
}

impl PruneSpec {
    /// A spec that removes nothing.
    pub fn empty(source_layers: usize) -> Self {
        PruneSpec {
            mode: PruneMode::ContiguousCosine,
            n: 0,
            selected: Vec::new(),
            block_start: None,
            source_layers,
            candidates: Vec::new(),
        }
    }

    /// Contiguous spec for a known block.
    pub fn block(start: usize, n: usize, source_layers: usize) -> Result<Self> {
        if start + n > source_layers {
            return Err(Error::input(format!(
                "block [{start}, {}) exceeds depth {source_layers}",
                start + n
            )));
        }
        Ok(PruneSpec {
            mode: PruneMode::ContiguousCosine,
            n,
            selected: (start..start + n).collect(),
            block_start: (n > 0).then_some(start),
            source_layers,
            candidates: Vec::new(),
        })
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.source_layers != n_layers {
            return Err(Error::input(format!(
                "spec was computed for {} layers, model has {n_layers}",
                self.source_layers
            )));
        }
        if self.selected.len() != self.n {
            return Err(Error::input("spec selection size differs from n"));
        }
        if self.selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("spec indices must be unique and ascending"));
        }
        if let Some(&bad) = self.selected.iter().find(|&&i| i >= n_layers) {
            return Err(Error::input(format!(
                "layer index {bad} out of range for {n_layers} layers"
            )));
        }
        if self.mode == PruneMode::ContiguousCosine && self.n > 0 {
            let s = self
                .block_start
                .ok_or_else(|| Error::input("contiguous spec without block start"))?;
            if self.selected != (s..s + self.n).collect::<Vec<_>>() {
                return Err(Error::input("contiguous spec is not a single block"));
            }
        }
        Ok(())
    }

    /// For each removed layer, the slot in the pruned model where its
    /// successor now sits. Adjacent removed layers share a slot.
    pub fn interface_slots(&self) -> Vec<(usize, usize)> {
        self.selected
            .iter()
            .map(|&r| {
                let kept_before = r - self.selected.iter().filter(|&&s| s < r).count();
                (r, kept_before)
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::format("prune spec", e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format("prune spec", e.to_string()))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean over calibration samples of the cosine between the flattened inputs
/// of layer `start` and layer `start + n`.
pub fn cosine_block_score<T: Element>(trace: &HiddenTrace<T>, start: usize, n: usize) -> Result<f64> {
    if trace.batch() == 0 {
        return Err(Error::input("empty trace"));
    }
    if start + n > trace.n_layers() {
        return Err(Error::input(format!(
            "block [{start}, {}) exceeds traced depth {}",
            start + n,
            trace.n_layers()
        )));
    }
    let mut total = 0.0;
    for i in 0..trace.batch() {
        let a: Vec<f64> = trace.sample(start, i).iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = trace.sample(start + n, i).iter().map(|v| v.as_f64()).collect();
        total += cosine(&a, &b);
    }
    Ok(total / trace.batch() as f64)
}

fn check_n(n: usize, n_layers: usize) -> Result<()> {
    if n >= n_layers {
        return Err(Error::input(format!(
            "cannot remove {n} of {n_layers} layers (need n < n_layers)"
        )));
    }
    Ok(())
}

/// Picks the block `[ℓ, ℓ+n)` whose endpoints are most similar; ties go to
/// the smallest `ℓ`.
pub fn select_prune_block<T: Element>(trace: &HiddenTrace<T>, n: usize) -> Result<PruneSpec> {
    let depth = trace.n_layers();
    check_n(n, depth)?;
    if n == 0 {
        return Ok(PruneSpec::empty(depth));
    }
    let mut candidates = Vec::with_capacity(depth - n + 1);
    let mut best: Option<(usize, f64)> = None;
    for start in 0..=depth - n {
        let score = cosine_block_score(trace, start, n)?;
        candidates.push(Candidate {
            round: 0,
            layer: start,
            score,
        });
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((start, score));
        }
    }
    let (start, _) = best.expect("at least one candidate");
    Ok(PruneSpec {
        candidates,
        ..PruneSpec::block(start, n, depth)?
    })
}

/// Picks the `n` layers with the highest single-layer input/output cosine;
/// ties go to the smaller index.
pub fn select_noncontiguous<T: Element>(trace: &HiddenTrace<T>, n: usize) -> Result<PruneSpec> {
    let depth = trace.n_layers();
    check_n(n, depth)?;
    let candidates = (0..depth)
        .map(|l| {
            Ok(Candidate {
                round: 0,
                layer: l,
                score: cosine_block_score(trace, l, 1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.layer.cmp(&b.layer)));
    let mut selected: Vec<usize> = order.iter().take(n).map(|c| c.layer).collect();
    selected.sort_unstable();
    Ok(PruneSpec {
        mode: PruneMode::NoncontiguousCosine,
        n,
        selected,
        block_start: None,
        source_layers: depth,
        candidates,
    })
}

/// `n` rounds of removing whichever remaining layer yields the lowest
/// perplexity on `tokens`.
pub fn select_ppl_greedy<T: Element>(
    model: &TransformerModel<T>,
    tokens: &[u32],
    n: usize,
    seq_len: usize,
) -> Result<PruneSpec> {
    let depth = model.n_layers();
    check_n(n, depth)?;
    let mut removed: Vec<usize> = Vec::new();
    let mut candidates = Vec::new();
    for round in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for layer in (0..depth).filter(|l| !removed.contains(l)) {
            let mut trial = removed.clone();
            trial.push(layer);
            trial.sort_unstable();
            let pruned = remove_layers(model, &trial)?;
            let ppl = eval::perplexity(&pruned, tokens, seq_len)?;
            candidates.push(Candidate {
                round,
                layer,
                score: ppl,
            });
            if best.is_none_or(|(_, b)| ppl < b) {
                best = Some((layer, ppl));
            }
        }
        removed.push(best.expect("a remaining layer").0);
    }
    removed.sort_unstable();
    Ok(PruneSpec {
        mode: PruneMode::PplGreedy,
        n,
        selected: removed,
        block_start: None,
        source_layers: depth,
        candidates,
    })
}

fn remove_layers<T: Element>(model: &TransformerModel<T>, selected: &[usize]) -> Result<TransformerModel<T>> {
    if !model.patches.is_empty() && !selected.is_empty() {
        return Err(Error::contract("cannot remove layers from a model with patch slots"));
    }
    let mut out = model.clone();
    out.layers = model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| !selected.contains(i))
        .map(|(_, l)| l.clone())
        .collect();
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Drops the selected layers, keeping the remaining order.
pub fn prune_layers<T: Element>(model: &TransformerModel<T>, spec: &PruneSpec) -> Result<TransformerModel<T>> {
    if spec.selected.is_empty() {
        return Ok(model.clone());
    }
    spec.validate(model.n_layers())?;
    remove_layers(model, &spec.selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_trace(layers: usize, seed: u64) -> HiddenTrace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // correlated random walk so the cosines are spread out
        let mut cur = Tensor::<f64>::randn([3, 4, 5], 1.0, &mut rng);
        let mut entries = vec![cur.clone()];
        for _ in 0..layers {
            let step = Tensor::<f64>::randn([3, 4, 5], 0.8, &mut rng);
            cur = cur.add(&step).unwrap();
            entries.push(cur.clone());
        }
        HiddenTrace::new(entries, 3, 4).unwrap()
    }

    fn brute_force_block(trace: &HiddenTrace<f64>, n: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for s in 0..=trace.n_layers() - n {
            // per-sample scalar loops
            let mut total = 0.0;
            for i in 0..trace.batch() {
                let a = trace.sample(s, i);
                let b = trace.sample(s + n, i);
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..a.len() {
                    dot += a[k] * b[k];
                    na += a[k] * a[k];
                    nb += b[k] * b[k];
                }
                total += dot / (na.sqrt() * nb.sqrt());
            }
            let score = total / trace.batch() as f64;
            if score > best.1 {
                best = (s, score);
            }
        }
        best.0
    }

    #[test]
    fn identical_and_opposite_endpoints() {
        let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let t = HiddenTrace::new(vec![x.clone(), x.clone()], 2, 3).unwrap();
        assert!((cosine_block_score(&t, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        let t = HiddenTrace::new(vec![x.clone(), x.scale(-1.0)], 2, 3).unwrap();
        assert!((cosine_block_score(&t, 0, 1).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_score_matches_scalar_loop() {
        let t = random_trace(4, 2);
        let got = cosine_block_score(&t, 1, 2).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            let a = t.sample(1, i);
            let b = t.sample(3, i);
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            total += dot / na / nb;
        }
        assert!((got - total / 3.0).abs() < 1e-6);
    }

    #[test]
    fn boundary_block_compares_two_candidates() {
        let t = random_trace(5, 3);
        let spec = select_prune_block(&t, 4).unwrap();
        assert_eq!(spec.candidates.len(), 2);
        assert!(select_prune_block(&t, 5).is_err());
    }

    #[test]
    fn ties_break_toward_smallest_index() {
        let x = Tensor::<f64>::ones([1, 2, 2]);
        let t = HiddenTrace::new(vec![x.clone(); 4], 1, 2).unwrap();
        assert_eq!(select_prune_block(&t, 1).unwrap().block_start, Some(0));
        assert_eq!(select_noncontiguous(&t, 2).unwrap().selected, vec![0, 1]);
    }

    #[test]
    fn noncontiguous_zero_is_empty() {
        let t = random_trace(4, 4);
        let spec = select_noncontiguous(&t, 0).unwrap();
        assert!(spec.selected.is_empty());
    }

    #[test]
    fn interface_slots_account_for_earlier_removals() {
        let spec = PruneSpec {
            mode: PruneMode::NoncontiguousCosine,
            n: 3,
            selected: vec![1, 2, 5],
            block_start: None,
            source_layers: 8,
            candidates: vec![],
        };
        assert_eq!(spec.interface_slots(), vec![(1, 1), (2, 1), (5, 3)]);
    }

    #[test]
    fn spec_validation() {
        assert!(PruneSpec::block(3, 2, 8).unwrap().validate(8).is_ok());
        assert!(PruneSpec::block(3, 2, 8).unwrap().validate(6).is_err());
        assert!(PruneSpec::block(7, 2, 8).is_err());
        let mut bad = PruneSpec::block(1, 2, 8).unwrap();
        bad.selected = vec![1, 3];
        assert!(bad.validate(8).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selection_matches_enumeration(layers in 2usize..=8, nraw in 1usize..=4, seed in any::<u64>()) {
            let n = nraw.min(layers - 1);
            let t = random_trace(layers, seed);
            let spec = select_prune_block(&t, n).unwrap();
            prop_assert_eq!(spec.block_start, Some(brute_force_block(&t, n)));

            // sort oracle for the per-layer mode
            let mut scored: Vec<(usize, f64)> = (0..layers)
                .map(|l| (l, cosine_block_score(&t, l, 1).unwrap()))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut expect: Vec<usize> = scored[..n].iter().map(|p| p.0).collect();
            expect.sort_unstable();
            prop_assert_eq!(select_noncontiguous(&t, n).unwrap().selected, expect);
        }

        #[test]
        fn positive_scaling_keeps_argmax(seed in any::<u64>(), s in 0.01f64..100.0) {
            let t = random_trace(6, seed);
            let scaled = HiddenTrace::new(
                t.entries().iter().map(|e| e.scale(s)).collect(), 3, 4).unwrap();
            prop_assert_eq!(
                select_prune_block(&t, 2).unwrap().block_start,
                select_prune_block(&scaled, 2).unwrap().block_start
            );
        }
    }
}
