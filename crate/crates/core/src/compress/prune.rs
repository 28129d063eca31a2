//! Magnitude pruning with cumulative masks.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Parameter, TransformerModel};
use crate::scalar::Scalar;

/// Sparsity levels used for iterative pruning.
pub const PRUNE_SCHEDULE: [f64; 6] = [0.15, 0.30, 0.45, 0.60, 0.75, 0.90];

/// Whether a parameter takes part in pruning: every weight matrix,
/// embeddings included. Biases and layer-norm vectors are never pruned.
pub fn is_prunable<T: Scalar>(p: &Parameter<T>) -> bool {
    p.tensor.rank() >= 2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PruneScope {
    /// One magnitude threshold across all prunable tensors.
    #[default]
    Global,
    /// Each tensor is pruned to the target sparsity on its own.
    PerTensor,
}

impl FromStr for PruneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(PruneScope::Global),
            "per_tensor" | "per_layer" => Ok(PruneScope::PerTensor),
            other => Err(Error::InvalidArgument(format!("unknown prune scope `{other}`"))),
        }
    }
}

/// Cumulative pruning masks (`true` = pruned) keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneState {
    masks: BTreeMap<String, Vec<bool>>,
    pub sparsity: f64,
    /// Levels applied so far, in order.
    pub schedule: Vec<f64>,
    pub reference_accuracy: Option<f64>,
    pub scope: PruneScope,
}

impl PruneState {
    /// Empty masks for every prunable parameter of `model`.
    pub fn new<T: Scalar>(model: &TransformerModel<T>) -> Self {
        Self::with_scope(model, PruneScope::Global)
    }

    pub fn with_scope<T: Scalar>(model: &TransformerModel<T>, scope: PruneScope) -> Self {
        let masks = model
            .parameters()
            .iter()
            .filter(|p| is_prunable(p))
            .map(|p| (p.name.clone(), vec![false; p.tensor.numel()]))
            .collect();
        Self {
            masks,
            sparsity: 0.0,
            schedule: Vec::new(),
            reference_accuracy: None,
            scope,
        }
    }

    /// Restores a state from stored masks.
    pub fn from_masks(
        masks: BTreeMap<String, Vec<bool>>,
        sparsity: f64,
        schedule: Vec<f64>,
        scope: PruneScope,
    ) -> Self {
        Self {
            masks,
            sparsity,
            schedule,
            reference_accuracy: None,
            scope,
        }
    }

    pub fn masks(&self) -> &BTreeMap<String, Vec<bool>> {
        &self.masks
    }

    pub fn mask(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(Vec::as_slice)
    }

    pub fn prunable_count(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    pub fn pruned_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    pub fn realized_sparsity(&self) -> f64 {
        match self.prunable_count() {
            0 => 0.0,
            n => self.pruned_count() as f64 / n as f64,
        }
    }

    /// Masks aligned with the model's parameter order, for the optimizer.
    pub fn aligned_masks<T: Scalar>(&self, model: &TransformerModel<T>) -> Vec<Option<Vec<bool>>> {
        model
            .parameters()
            .iter()
            .map(|p| self.masks.get(&p.name).cloned())
            .collect()
    }

    /// Sets every masked weight of `model` to zero.
    pub fn apply<T: Scalar>(&self, model: &mut TransformerModel<T>) -> Result<()> {
        for p in model.parameters_mut() {
            if let Some(mask) = self.masks.get(&p.name) {
                if mask.len() != p.tensor.numel() {
                    return Err(Error::ModelMismatch(format!(
                        "mask for `{}` has the wrong size",
                        p.name
                    )));
                }
                for (w, &m) in p.tensor.data_mut().iter_mut().zip(mask) {
                    if m {
                        *w = T::zero();
                    }
                }
            }
        }
        Ok(())
    }

    fn check_model<T: Scalar>(&self, model: &TransformerModel<T>) -> Result<()> {
        let prunable: Vec<&Parameter<T>> = model.parameters().iter().filter(|p| is_prunable(p)).collect();
        if prunable.len() != self.masks.len()
            || prunable
                .iter()
                .any(|p| self.masks.get(&p.name).map(Vec::len) != Some(p.tensor.numel()))
        {
            return Err(Error::ModelMismatch("prune masks do not match the model".into()));
        }
        Ok(())
    }
}

/// Candidate ordering: unmasked after masked, then by magnitude, then by
/// parameter name (via its rank) and flat index.
#[derive(Clone, Copy)]
struct Candidate {
    masked: bool,
    magnitude: f64,
    name_rank: u32,
    index: u32,
}

fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.masked
        .cmp(&a.masked)
        .then(a.magnitude.total_cmp(&b.magnitude))
        .then(a.name_rank.cmp(&b.name_rank))
        .then(a.index.cmp(&b.index))
}

/// Marks the `count` lowest-ranked candidates.
fn select_smallest(mut cands: Vec<Candidate>, count: usize) -> Vec<Candidate> {
    if count == 0 {
        return Vec::new();
    }
    if count < cands.len() {
        cands.select_nth_unstable_by(count - 1, rank_order);
        cands.truncate(count);
    }
    cands
}

/// Prunes `model` to `target` sparsity over the prunable weights, extending
/// the masks of `state`. The weights with smallest magnitude go first; ties
/// are broken by parameter name, then flat index. Already-pruned weights stay
/// pruned. Returns the updated state; the model's pruned weights are zeroed.
pub fn prune_global<T: Scalar>(model: &mut TransformerModel<T>, target: f64, state: &PruneState) -> Result<PruneState> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidSparsity {
            target,
            reason: "must lie in [0, 1]",
        });
    }
    if target < state.sparsity - 1e-12 {
        return Err(Error::InvalidSparsity {
            target,
            reason: "below the current sparsity; masks only grow",
        });
    }
    state.check_model(model)?;
    let mut next = state.clone();
    let names: Vec<&String> = next.masks.keys().collect();
    let rank_of = |name: &str| names.binary_search_by(|n| n.as_str().cmp(name)).expect("mask exists") as u32;

    let params: Vec<&Parameter<T>> = model.parameters().iter().filter(|p| is_prunable(p)).collect();
    let candidates = |p: &Parameter<T>| -> Vec<Candidate> {
        let rank = rank_of(&p.name);
        let mask = &state.masks[&p.name];
        p.tensor
            .data()
            .iter()
            .zip(mask)
            .enumerate()
            .map(|(i, (w, &m))| Candidate {
                masked: m,
                magnitude: w.as_f64().abs(),
                name_rank: rank,
                index: i as u32,
            })
            .collect()
    };
    let chosen: Vec<Candidate> = match state.scope {
        PruneScope::Global => {
            let total = state.prunable_count();
            let count = (target * total as f64).round() as usize;
            let all: Vec<Candidate> = params.iter().flat_map(|p| candidates(p)).collect();
            select_smallest(all, count.max(state.pruned_count()))
        }
        PruneScope::PerTensor => params
            .iter()
            .flat_map(|p| {
                let c = candidates(p);
                let already = c.iter().filter(|c| c.masked).count();
                let count = (target * c.len() as f64).round() as usize;
                select_smallest(c, count.max(already))
            })
            .collect(),
    };
    let names: Vec<String> = names.into_iter().cloned().collect();
    for c in chosen {
        next.masks.get_mut(&names[c.name_rank as usize]).expect("mask exists")[c.index as usize] = true;
    }
    next.sparsity = target;
    next.schedule.push(target);
    next.apply(model)?;
    Ok(next)
}

/// Nonzero parameters under `state`: unmasked prunable weights plus every
/// non-prunable parameter. Tied tensors are counted once.
pub fn nonzero_count<T: Scalar>(model: &TransformerModel<T>, state: &PruneState) -> usize {
    model.total_parameters() - state.pruned_count()
}

/// Brute-force count of parameters that are not exactly zero.
pub fn count_nonzero_weights<T: Scalar>(model: &TransformerModel<T>) -> usize {
    model
        .parameters()
        .iter()
        .map(|p| p.tensor.data().iter().filter(|v| **v != T::zero()).count())
        .sum()
}
