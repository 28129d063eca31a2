use super::prune::{is_prunable, nonzero_count, PruneState, PRUNE_SCHEDULE};
use super::quant::{QuantizationSpec, QuantizedTensor};
use super::recover::{iterative_prune_with_recovery, RecoveryConfig, RecoveryLevel};
use crate::data::ClassificationData;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::scalar::Scalar;

/// Storage overhead per quantized tensor: `q0` and `Δ` as two 32-bit floats.
pub const QUANT_OVERHEAD_BITS: u64 = 64;
/// Precision treated as uncompressed full precision.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Every parameter of a model quantized per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<T> {
    base: TransformerModel<T>,
    tensors: Vec<QuantizedTensor<T>>,
}

impl<T: Scalar> QuantizedModel<T> {
    /// Quantizes every parameter on its own min/max grid. With `prune`,
    /// prunable tensors use a zero-anchored grid so pruned weights decode to
    /// exactly zero.
    pub fn quantize(model: &TransformerModel<T>, bits: u32, prune: Option<&PruneState>) -> Result<Self> {
        let spec = QuantizationSpec::new(bits)?;
        let tensors = model
            .parameters()
            .iter()
            .map(|p| {
                let sparse = prune.is_some_and(|s| s.pruned_count() > 0) && is_prunable(p);
                if sparse {
                    QuantizedTensor::quantize_zero_anchored(&p.tensor, spec)
                } else {
                    QuantizedTensor::quantize(&p.tensor, spec)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            base: model.clone(),
            tensors,
        })
    }

    /// Rebuilds from stored tensors in parameter order.
    pub fn from_tensors(base: TransformerModel<T>, tensors: Vec<QuantizedTensor<T>>) -> Result<Self> {
        if tensors.len() != base.parameters().len()
            || tensors
                .iter()
                .zip(base.parameters())
                .any(|(q, p)| q.shape() != p.tensor.shape())
        {
            return Err(Error::ModelMismatch("quantized tensors do not match the model".into()));
        }
        Ok(Self { base, tensors })
    }

    pub fn tensors(&self) -> &[QuantizedTensor<T>] {
        &self.tensors
    }

    pub fn config(&self) -> &crate::model::ModelConfig {
        self.base.config()
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.base.parameters().iter().map(|p| p.name.as_str())
    }

    /// The model with every weight replaced by its dequantized value;
    /// activations stay at full precision.
    pub fn dequantized(&self) -> Result<TransformerModel<T>> {
        let mut m = self.base.clone();
        for (p, q) in m.parameters_mut().iter_mut().zip(&self.tensors) {
            let d = q.dequantize()?;
            p.tensor.data_mut().copy_from_slice(d.data());
        }
        Ok(m)
    }

    /// `Σ numel · k + 64` bits over tensors.
    pub fn memory_bits(&self) -> u64 {
        self.tensors
            .iter()
            .map(|q| q.numel() as u64 * q.bits() as u64 + QUANT_OVERHEAD_BITS)
            .sum()
    }
}

/// Quantizes every parameter and returns the simulated-quantization model.
pub fn quantize_model<T: Scalar>(model: &TransformerModel<T>, bits: u32) -> Result<TransformerModel<T>> {
    QuantizedModel::quantize(model, bits, None)?.dequantized()
}

/// Storage bits of a pruned, quantized model: nonzero parameters at `bits`
/// each plus per-tensor grid overhead. At 32 bits the model is stored
/// unquantized and carries no overhead.
pub fn compressed_memory_bits<T: Scalar>(model: &TransformerModel<T>, state: &PruneState, bits: u32) -> u64 {
    let payload = nonzero_count(model, state) as u64 * bits as u64;
    if bits >= FULL_PRECISION_BITS {
        payload
    } else {
        payload + QUANT_OVERHEAD_BITS * model.parameters().len() as u64
    }
}

#[derive(Clone, Debug)]
pub struct CompressedModel<T> {
    /// Pruned and (simulated) quantized model.
    pub model: TransformerModel<T>,
    pub prune: PruneState,
    pub bits: u32,
    pub nonzero: usize,
    pub memory_bits: u64,
    pub recovery: Vec<RecoveryLevel>,
}

/// Schedule used to reach `sparsity`: standard levels below it, then the
/// target itself.
pub fn schedule_to(sparsity: f64) -> Vec<f64> {
    if sparsity <= 0.0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = PRUNE_SCHEDULE
        .iter()
        .copied()
        .filter(|&l| l < sparsity - 1e-9)
        .collect();
    s.push(sparsity);
    s
}

/// Iteratively prunes (with recovery) to `sparsity`, then quantizes to
/// `bits` on zero-anchored grids. `bits = 32` keeps full precision.
pub fn combine_prune_quantize<T: Scalar>(
    model: &TransformerModel<T>,
    sparsity: f64,
    bits: u32,
    data: &ClassificationData,
    recovery: &RecoveryConfig,
) -> Result<CompressedModel<T>> {
    QuantizationSpec::new(bits)?;
    let PrunedLevel {
        model: pruned,
        prune: state,
        recovery: log,
        ..
    } = prune_sweep(model, &[sparsity], data, recovery)?.remove(0);
    let compressed = if bits >= FULL_PRECISION_BITS {
        pruned
    } else {
        QuantizedModel::quantize(&pruned, bits, Some(&state))?.dequantized()?
    };
    Ok(CompressedModel {
        nonzero: nonzero_count(&compressed, &state),
        memory_bits: compressed_memory_bits(&compressed, &state, bits),
        model: compressed,
        prune: state,
        bits,
        recovery: log,
    })
}

/// A model pruned (with recovery) to one target of a sweep.
#[derive(Clone, Debug)]
pub struct PrunedLevel<T> {
    pub sparsity: f64,
    pub model: TransformerModel<T>,
    pub prune: PruneState,
    pub recovery: Vec<RecoveryLevel>,
}

/// Prunes to every target in `sparsities`, in ascending order. Each result
/// equals pruning from `model` through [`schedule_to`] of its target; runs
/// whose schedules nest share the common prefix instead of repeating it.
pub fn prune_sweep<T: Scalar>(
    model: &TransformerModel<T>,
    sparsities: &[f64],
    data: &ClassificationData,
    recovery: &RecoveryConfig,
) -> Result<Vec<PrunedLevel<T>>> {
    let mut targets = sparsities.to_vec();
    targets.sort_by(f64::total_cmp);
    targets.dedup();
    let fresh = || (model.clone(), PruneState::new(model), Vec::new());
    let (mut current, mut state, mut log) = fresh();
    let mut out = Vec::with_capacity(targets.len());
    for s in targets {
        let schedule = schedule_to(s);
        if !schedule.starts_with(&state.schedule) {
            (current, state, log) = fresh();
        }
        let rest = &schedule[state.schedule.len()..];
        let (next, more) = iterative_prune_with_recovery(&mut current, data, rest, recovery, state)?;
        state = next;
        log.extend(more);
        out.push(PrunedLevel {
            sparsity: s,
            model: current.clone(),
            prune: state.clone(),
            recovery: log.clone(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::prune::prune_global;
    use crate::model::{Mode, ModelConfig};

    fn model() -> TransformerModel<f32> {
        let mut c = ModelConfig::new(1, 16, 20);
        c.max_seq_len = 8;
        TransformerModel::new(c).unwrap()
    }

    #[test]
    fn memory_ratio_approaches_bits_over_32() {
        let m = model();
        let q = QuantizedModel::quantize(&m, 4, None).unwrap();
        let full = m.memory_footprint(32, 0);
        assert_eq!(q.memory_bits(), m.memory_footprint(4, QUANT_OVERHEAD_BITS));
        let ratio = q.memory_bits() as f64 / full as f64;
        let overhead = (QUANT_OVERHEAD_BITS * m.parameters().len() as u64) as f64 / full as f64;
        assert!((ratio - (4.0 / 32.0 + overhead)).abs() < 1e-12);
    }

    #[test]
    fn quantizing_twice_is_idempotent() {
        let m = model();
        let once = quantize_model(&m, 4).unwrap();
        let twice = quantize_model(&once, 4).unwrap();
        let tokens: Vec<u32> = (0..8).map(|i| 4 + i % 16).collect();
        let a = once.forward_classify(&tokens, 1, Mode::Eval).unwrap();
        let b = twice.forward_classify(&tokens, 1, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sparse_quantization_keeps_pruned_weights_zero() {
        let mut m = model();
        let s0 = PruneState::new(&m);
        let s = prune_global(&mut m, 0.4, &s0).unwrap();
        let q = QuantizedModel::quantize(&m, 3, Some(&s))
            .unwrap()
            .dequantized()
            .unwrap();
        for p in q.parameters() {
            if let Some(mask) = s.mask(&p.name) {
                assert!(p.tensor.data().iter().zip(mask).all(|(&w, &k)| !k || w == 0.0));
            }
        }
    }

    #[test]
    fn memory_decreases_with_sparsity() {
        let mut m = model();
        let mut s = PruneState::new(&m);
        let mut last = compressed_memory_bits(&m, &s, 8);
        assert_eq!(compressed_memory_bits(&m, &s, 32), m.memory_footprint(32, 0));
        for &t in &PRUNE_SCHEDULE {
            s = prune_global(&mut m, t, &s).unwrap();
            let now = compressed_memory_bits(&m, &s, 8);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn sweep_matches_separate_runs() {
        use crate::data::{make_synthetic_classification, LabelRule};
        let data = make_synthetic_classification(60, 6, 20, LabelRule::MajorityToken, 2).unwrap();
        let m = model();
        let cfg = RecoveryConfig {
            finetune: crate::train::FinetuneConfig {
                batch_size: 20,
                ..Default::default()
            },
            ratio: 2.0,
            ..Default::default()
        };
        let swept = prune_sweep(&m, &[0.45, 0.0, 0.15, 0.4], &data, &cfg).unwrap();
        assert_eq!(
            swept.iter().map(|l| l.sparsity).collect::<Vec<_>>(),
            [0.0, 0.15, 0.4, 0.45]
        );
        assert_eq!(swept[0].model, m);
        for level in &swept {
            let alone = prune_sweep(&m, &[level.sparsity], &data, &cfg).unwrap().remove(0);
            assert_eq!(alone.model, level.model);
            assert_eq!(alone.prune, level.prune);
            assert_eq!(alone.recovery, level.recovery);
            assert_eq!(level.recovery.len(), schedule_to(level.sparsity).len());
        }
    }

    #[test]
    fn schedule_construction() {
        assert!(schedule_to(0.0).is_empty());
        assert_eq!(schedule_to(0.45), vec![0.15, 0.30, 0.45]);
        assert_eq!(schedule_to(0.4), vec![0.15, 0.30, 0.4]);
    }
}
