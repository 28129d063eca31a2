use crate::compress::{quantize_model, FULL_PRECISION_BITS};
use crate::data::ClassificationData;
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::scalar::Scalar;
use crate::train::{accuracy, finetune_classifier, FinetuneConfig};

/// Downstream accuracy of one pretraining checkpoint before and after
/// quantization.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    /// Fraction of the pretraining run completed at the checkpoint.
    pub fraction: f64,
    pub bits: u32,
    pub acc_full: f64,
    pub acc_quantized: f64,
    /// `acc_full − acc_quantized`.
    pub drop: f64,
}

/// Finetunes each checkpoint on `data`, then quantizes the finetuned model
/// to every width in `bits` and records validation accuracy. Rows are
/// ordered by checkpoint, then by `bits`.
pub fn convergence_vs_compressibility<T: Scalar>(
    checkpoints: &[(f64, TransformerModel<T>)],
    data: &ClassificationData,
    bits: &[u32],
    finetune: &FinetuneConfig,
) -> Result<Vec<ConvergenceRow>> {
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument("need at least two checkpoints".into()));
    }
    let first = checkpoints[0].1.config();
    if let Some((f, _)) = checkpoints.iter().find(|(_, m)| !m.config().same_architecture(first)) {
        return Err(Error::ModelMismatch(format!(
            "checkpoint at fraction {f} has a different architecture"
        )));
    }
    let mut rows = Vec::with_capacity(checkpoints.len() * bits.len());
    for (fraction, model) in checkpoints {
        let mut tuned = model.clone();
        let acc_full = finetune_classifier(&mut tuned, data, finetune)?.val_accuracy;
        for &k in bits {
            let acc_quantized = if k >= FULL_PRECISION_BITS {
                acc_full
            } else {
                accuracy(&quantize_model(&tuned, k)?, &data.validation)?
            };
            rows.push(ConvergenceRow {
                fraction: *fraction,
                bits: k,
                acc_full,
                acc_quantized,
                drop: acc_full - acc_quantized,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_classification, LabelRule};
    use crate::model::ModelConfig;

    fn setup() -> (TransformerModel<f64>, ClassificationData, FinetuneConfig) {
        let data = make_synthetic_classification(60, 6, 12, LabelRule::MajorityToken, 4).unwrap();
        let mut c = ModelConfig::new(1, 8, 12);
        c.max_seq_len = 7;
        let cfg = FinetuneConfig {
            batch_size: 20,
            epochs: 1,
            ..Default::default()
        };
        (TransformerModel::new(c).unwrap(), data, cfg)
    }

    #[test]
    fn identical_checkpoints_give_identical_rows() {
        let (m, data, cfg) = setup();
        let rows = convergence_vs_compressibility(&[(0.5, m.clone()), (0.5, m)], &data, &[4, 32], &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0], rows[2]);
        assert_eq!(rows[1], rows[3]);
        assert_eq!(rows[1].drop, 0.0);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (m, data, cfg) = setup();
        let mut c = m.config().clone();
        c.num_layers = 2;
        let other = TransformerModel::new(c).unwrap();
        assert!(convergence_vs_compressibility(&[(0.1, m.clone()), (1.0, other)], &data, &[4], &cfg).is_err());
        assert!(convergence_vs_compressibility(&[(0.1, m)], &data, &[4], &cfg).is_err());
    }
}
