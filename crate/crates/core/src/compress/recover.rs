use super::prune::{prune_global, PruneState};
use crate::data::ClassificationData;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::scalar::Scalar;
use crate::seed;
use crate::train::{accuracy, ClassifierTrainer, FinetuneConfig};

/// Fraction of the reference validation accuracy that counts as recovered.
pub const RECOVERY_RATIO: f64 = 0.995;

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryConfig {
    pub finetune: FinetuneConfig,
    /// Maximum recovery epochs per sparsity level.
    pub max_epochs: f64,
    /// Recovered once validation accuracy ≥ `ratio × reference`.
    pub ratio: f64,
    /// Validation accuracy is checked every this many steps.
    pub check_every: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig::default(),
            max_epochs: 1.0,
            ratio: RECOVERY_RATIO,
            check_every: 1,
        }
    }
}

/// Per-level outcome of iterative pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryLevel {
    pub target: f64,
    pub realized_sparsity: f64,
    pub accuracy_after_prune: f64,
    pub recovery_steps: u64,
    /// Recovery steps as a fraction of one epoch.
    pub recovery_epochs: f64,
    pub final_accuracy: f64,
    pub recovered: bool,
}

/// Prunes through `schedule`, finetuning after each level with pruned
/// weights held at zero until validation accuracy reaches `ratio ×` the
/// accuracy measured before the first level, or `max_epochs` elapse.
pub fn iterative_prune_with_recovery<T: Scalar>(
    model: &mut TransformerModel<T>,
    data: &ClassificationData,
    schedule: &[f64],
    cfg: &RecoveryConfig,
    state: PruneState,
) -> Result<(PruneState, Vec<RecoveryLevel>)> {
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(
            "sparsity schedule must be strictly ascending".into(),
        ));
    }
    let mut state = state;
    let reference = match state.reference_accuracy {
        Some(r) => r,
        None => {
            let r = accuracy(model, &data.validation)?;
            state.reference_accuracy = Some(r);
            r
        }
    };
    let goal = cfg.ratio * reference;
    let mut log = Vec::with_capacity(schedule.len());
    for &target in schedule {
        let level = state.schedule.len() as u64;
        state = prune_global(model, target, &state)?;
        let after = accuracy(model, &data.validation)?;
        let mut ft = cfg.finetune.clone();
        ft.seed = seed::derive(cfg.finetune.seed, level);
        let mut trainer = ClassifierTrainer::new(model, ft)?;
        trainer.optimizer.set_frozen(state.aligned_masks(model))?;
        let per_epoch = trainer.steps_per_epoch(&data.train);
        let budget = (cfg.max_epochs * per_epoch as f64).round() as u64;
        let mut acc = after;
        while acc < goal && trainer.steps() < budget {
            trainer.step(model, &data.train)?;
            if trainer.steps() % cfg.check_every.max(1) as u64 == 0 || trainer.steps() == budget {
                acc = accuracy(model, &data.validation)?;
            }
        }
        log.push(RecoveryLevel {
            target,
            realized_sparsity: state.realized_sparsity(),
            accuracy_after_prune: after,
            recovery_steps: trainer.steps(),
            recovery_epochs: trainer.steps() as f64 / per_epoch.max(1) as f64,
            final_accuracy: acc,
            recovered: acc >= goal,
        });
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::prune::count_nonzero_weights;
    use crate::data::{make_synthetic_classification, LabelRule};
    use crate::model::ModelConfig;
    use crate::train::finetune_classifier;

    fn trained() -> (TransformerModel<f64>, ClassificationData) {
        let data = make_synthetic_classification(300, 8, 16, LabelRule::MajorityToken, 3).unwrap();
        let mut mc = ModelConfig::new(1, 16, 16);
        mc.num_heads = 2;
        mc.max_seq_len = 9;
        let mut m = TransformerModel::new(mc).unwrap();
        let cfg = FinetuneConfig {
            lr: 3e-3,
            batch_size: 30,
            epochs: 8,
            ..Default::default()
        };
        finetune_classifier(&mut m, &data, &cfg).unwrap();
        (m, data)
    }

    #[test]
    fn masks_grow_and_pruned_weights_stay_zero_through_recovery() {
        let (mut m, data) = trained();
        let cfg = RecoveryConfig {
            finetune: FinetuneConfig {
                batch_size: 30,
                ..Default::default()
            },
            ..Default::default()
        };
        let s0 = PruneState::new(&m);
        let (s1, log1) = iterative_prune_with_recovery(&mut m, &data, &[0.15], &cfg, s0).unwrap();
        let (s2, log2) = iterative_prune_with_recovery(&mut m, &data, &[0.30], &cfg, s1.clone()).unwrap();
        for (name, mask) in s1.masks() {
            assert!(mask.iter().zip(s2.mask(name).unwrap()).all(|(&a, &b)| !a || b));
        }
        for p in m.parameters() {
            if let Some(mask) = s2.mask(&p.name) {
                assert!(p.tensor.data().iter().zip(mask).all(|(&w, &k)| !k || w == 0.0));
            }
        }
        assert!(count_nonzero_weights(&m) <= m.total_parameters() - s2.pruned_count());
        assert_eq!(log1.len() + log2.len(), 2);
        assert!(log1[0].recovery_epochs <= 1.0 && log2[0].recovery_epochs <= 1.0);
    }

    #[test]
    fn schedule_must_ascend() {
        let (mut m, data) = trained();
        let s = PruneState::new(&m);
        let err = iterative_prune_with_recovery(&mut m, &data, &[0.3, 0.15], &RecoveryConfig::default(), s);
        assert!(err.is_err());
    }
}
