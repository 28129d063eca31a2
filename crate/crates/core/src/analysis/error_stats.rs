use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ModuleGroup, TransformerModel};
use crate::scalar::Scalar;

/// Mean and population variance of `original − compressed` over a set of
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorStats {
    pub group: String,
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn from_differences(group: impl Into<String>, diffs: &[f64]) -> Self {
        let count = diffs.len();
        let (mean, variance) = if count == 0 {
            (0.0, 0.0)
        } else {
            let n = count as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            (mean, diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n)
        };
        Self {
            group: group.into(),
            mean,
            variance,
            count,
        }
    }

    /// Count-weighted pooling of disjoint groups into one.
    pub fn pooled(group: impl Into<String>, parts: &[ErrorStats]) -> Self {
        let count: usize = parts.iter().map(|s| s.count).sum();
        if count == 0 {
            return Self::from_differences(group, &[]);
        }
        let n = count as f64;
        let mean = parts.iter().map(|s| s.mean * s.count as f64).sum::<f64>() / n;
        let variance = parts
            .iter()
            .map(|s| s.count as f64 * (s.variance + (s.mean - mean) * (s.mean - mean)))
            .sum::<f64>()
            / n;
        Self {
            group: group.into(),
            mean,
            variance,
            count,
        }
    }
}

/// Elementwise `original − compressed` per parameter, in parameter order.
pub fn weight_differences<T: Scalar>(
    original: &TransformerModel<T>,
    compressed: &TransformerModel<T>,
) -> Result<Vec<(String, ModuleGroup, Vec<f64>)>> {
    let (a, b) = (original.parameters(), compressed.parameters());
    if a.len() != b.len() {
        return Err(Error::ModelMismatch(format!("{} vs {} parameters", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            if p.name != q.name || p.tensor.shape() != q.tensor.shape() {
                return Err(Error::ModelMismatch(format!(
                    "parameter {} {:?} vs {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    q.name,
                    q.tensor.shape()
                )));
            }
            let d = p
                .tensor
                .data()
                .iter()
                .zip(q.tensor.data())
                .map(|(&x, &y)| x.as_f64() - y.as_f64())
                .collect();
            Ok((p.name.clone(), p.group, d))
        })
        .collect()
}

/// Per module group statistics of the compression error, in
/// [`ModuleGroup::ALL`] order. Groups without parameters are omitted.
pub fn compression_error_stats<T: Scalar>(
    original: &TransformerModel<T>,
    compressed: &TransformerModel<T>,
) -> Result<Vec<ErrorStats>> {
    let mut by_group: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (_, group, d) in weight_differences(original, compressed)? {
        let rank = ModuleGroup::ALL.iter().position(|&g| g == group).unwrap_or(usize::MAX);
        by_group.entry(rank).or_default().extend(d);
    }
    Ok(by_group
        .into_iter()
        .map(|(rank, d)| ErrorStats::from_differences(ModuleGroup::ALL[rank].as_str(), &d))
        .collect())
}

/// Statistics over every weight of the model.
pub fn whole_model_error_stats<T: Scalar>(
    original: &TransformerModel<T>,
    compressed: &TransformerModel<T>,
) -> Result<ErrorStats> {
    let all: Vec<f64> = weight_differences(original, compressed)?
        .into_iter()
        .flat_map(|(_, _, d)| d)
        .collect();
    Ok(ErrorStats::from_differences("all", &all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{prune_global, quantize_model, PruneState};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn model() -> TransformerModel<f64> {
        let mut c = ModelConfig::new(2, 16, 24);
        c.max_seq_len = 8;
        TransformerModel::new(c).unwrap()
    }

    #[test]
    fn identity_has_zero_error() {
        let m = model();
        for s in compression_error_stats(&m, &m).unwrap() {
            assert_eq!((s.mean, s.variance), (0.0, 0.0));
            assert!(s.count > 0);
        }
    }

    #[test]
    fn small_worked_example() {
        // [0, 0.4, 1] on a 2-bit grid decodes to [0, 1/3, 1].
        let s = ErrorStats::from_differences("w", &[0.0, 0.4 - 1.0 / 3.0, 0.0]);
        let e = 0.4 - 1.0 / 3.0;
        assert!((s.mean - e / 3.0).abs() < 1e-15);
        let m = e / 3.0;
        let var = (2.0 * m * m + (e - m) * (e - m)) / 3.0;
        assert!((s.variance - var).abs() < 1e-15);
        assert!((s.mean - 0.022222).abs() < 1e-5);
    }

    #[test]
    fn pruning_error_at_masked_positions_is_the_original_weight() {
        let m = model();
        let mut p = m.clone();
        let s0 = PruneState::new(&p);
        let s = prune_global(&mut p, 0.5, &s0).unwrap();
        for (name, _, d) in weight_differences(&m, &p).unwrap() {
            let orig = m.parameter(&name).unwrap().tensor.data();
            match s.mask(&name) {
                Some(mask) => {
                    for ((&k, &e), &w) in mask.iter().zip(&d).zip(orig) {
                        assert_eq!(e, if k { w } else { 0.0 });
                    }
                }
                None => assert!(d.iter().all(|&e| e == 0.0)),
            }
        }
    }

    #[test]
    fn pooled_groups_match_whole_model() {
        let m = model();
        let q = quantize_model(&m, 3).unwrap();
        let groups = compression_error_stats(&m, &q).unwrap();
        let pooled = ErrorStats::pooled("all", &groups);
        let whole = whole_model_error_stats(&m, &q).unwrap();
        assert_eq!(pooled.count, whole.count);
        assert!((pooled.mean - whole.mean).abs() < 1e-10);
        assert!((pooled.variance - whole.variance).abs() < 1e-10);
    }

    #[test]
    fn mismatched_models_are_rejected() {
        let mut c = ModelConfig::new(1, 16, 24);
        c.max_seq_len = 8;
        let other = TransformerModel::<f64>::new(c).unwrap();
        assert!(compression_error_stats(&model(), &other).is_err());
    }

    proptest! {
        #[test]
        fn pooling_is_exact(chunks in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 0..20), 1..6)) {
            let parts: Vec<_> = chunks.iter().map(|c| ErrorStats::from_differences("g", c)).collect();
            let all: Vec<f64> = chunks.concat();
            let whole = ErrorStats::from_differences("all", &all);
            let pooled = ErrorStats::pooled("all", &parts);
            prop_assert!(pooled.variance >= 0.0);
            prop_assert!((pooled.mean - whole.mean).abs() < 1e-12);
            prop_assert!((pooled.variance - whole.variance).abs() < 1e-12);
        }
    }
}
