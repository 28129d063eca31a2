use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Whether the quality value is maximized (accuracy) or minimized
/// (perplexity).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricMode {
    #[default]
    Maximize,
    Minimize,
}

/// Which memory column the frontier is computed over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MemoryMetric {
    #[default]
    Bits,
    NonzeroParams,
}

impl FromStr for MetricMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximize" | "max" | "accuracy" => Ok(Self::Maximize),
            "minimize" | "min" | "perplexity" => Ok(Self::Minimize),
            _ => Err(Error::InvalidArgument(format!("unknown metric mode {s:?}"))),
        }
    }
}

impl FromStr for MemoryMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bits" | "memory_bits" => Ok(Self::Bits),
            "nonzero" | "nonzero_params" => Ok(Self::NonzeroParams),
            _ => Err(Error::InvalidArgument(format!("unknown memory metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionPoint {
    pub label: String,
    pub memory_bits: u64,
    pub nonzero_params: u64,
    /// Accuracy, or perplexity under [`MetricMode::Minimize`].
    pub accuracy: f64,
    pub metadata: BTreeMap<String, String>,
}

impl CompressionPoint {
    pub fn new(label: impl Into<String>, memory_bits: u64, nonzero_params: u64, accuracy: f64) -> Self {
        Self {
            label: label.into(),
            memory_bits,
            nonzero_params,
            accuracy,
            metadata: BTreeMap::new(),
        }
    }

    pub fn memory(&self, metric: MemoryMetric) -> u64 {
        match metric {
            MemoryMetric::Bits => self.memory_bits,
            MemoryMetric::NonzeroParams => self.nonzero_params,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frontier {
    /// Non-dominated points by ascending memory.
    pub frontier: Vec<CompressionPoint>,
    pub dominated: Vec<CompressionPoint>,
}

/// `true` when `a` is at least as good as `b` in both coordinates and
/// strictly better in one.
pub fn dominates(a: &CompressionPoint, b: &CompressionPoint, metric: MemoryMetric, mode: MetricMode) -> bool {
    let (ma, mb) = (a.memory(metric), b.memory(metric));
    let (qa, qb) = match mode {
        MetricMode::Maximize => (a.accuracy, b.accuracy),
        MetricMode::Minimize => (-a.accuracy, -b.accuracy),
    };
    ma <= mb && qa >= qb && (ma < mb || qa > qb)
}

/// Splits `points` into the Pareto frontier and the dominated rest. Exact
/// duplicates in both coordinates keep the lexicographically smallest label
/// on the frontier.
pub fn pareto_frontier(points: &[CompressionPoint], metric: MemoryMetric, mode: MetricMode) -> Result<Frontier> {
    if points.is_empty() {
        return Err(Error::Empty("compression points"));
    }
    if let Some(p) = points.iter().find(|p| p.memory(metric) == 0 || p.accuracy.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "point {:?} needs positive memory and a numeric metric",
            p.label
        )));
    }
    let better = |a: f64, b: f64| match mode {
        MetricMode::Maximize => b.total_cmp(&a),
        MetricMode::Minimize => a.total_cmp(&b),
    };
    let mut order: Vec<&CompressionPoint> = points.iter().collect();
    order.sort_by(|a, b| {
        a.memory(metric)
            .cmp(&b.memory(metric))
            .then_with(|| better(a.accuracy, b.accuracy))
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut out = Frontier::default();
    let mut best: Option<f64> = None;
    for p in order {
        let improves = best.is_none_or(|b| better(p.accuracy, b) == Ordering::Less);
        if improves {
            best = Some(p.accuracy);
            out.frontier.push(p.clone());
        } else {
            out.dominated.push(p.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(label: &str, mem: u64, acc: f64) -> CompressionPoint {
        CompressionPoint::new(label, mem, mem, acc)
    }

    /// Quadratic reference: a point is kept unless dominated, or unless an
    /// identical point with a smaller (label, index) exists.
    fn oracle(points: &[CompressionPoint], mode: MetricMode) -> Vec<usize> {
        let mut keep: Vec<usize> = (0..points.len())
            .filter(|&i| {
                let p = &points[i];
                !points.iter().enumerate().any(|(j, q)| {
                    dominates(q, p, MemoryMetric::Bits, mode)
                        || (j != i
                            && q.memory_bits == p.memory_bits
                            && q.accuracy == p.accuracy
                            && (q.label.as_str(), j) < (p.label.as_str(), i))
                })
            })
            .collect();
        keep.sort_by_key(|&i| points[i].memory_bits);
        keep
    }

    #[test]
    fn single_point_is_its_own_frontier() {
        let f = pareto_frontier(&[pt("a", 3, 0.5)], MemoryMetric::Bits, MetricMode::Maximize).unwrap();
        assert_eq!(f.frontier.len(), 1);
        assert!(f.dominated.is_empty());
    }

    #[test]
    fn three_point_example() {
        let pts = [pt("a", 10, 0.80), pt("b", 8, 0.85), pt("c", 12, 0.90)];
        let f = pareto_frontier(&pts, MemoryMetric::Bits, MetricMode::Maximize).unwrap();
        let labels: Vec<_> = f.frontier.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["b", "c"]);
        assert_eq!(f.dominated, vec![pts[0].clone()]);
    }

    #[test]
    fn duplicates_keep_smallest_label() {
        let pts = [pt("z", 5, 0.7), pt("m", 5, 0.7), pt("q", 5, 0.7)];
        let f = pareto_frontier(&pts, MemoryMetric::Bits, MetricMode::Maximize).unwrap();
        assert_eq!(f.frontier.len(), 1);
        assert_eq!(f.frontier[0].label, "m");
        assert_eq!(f.dominated.len(), 2);
    }

    #[test]
    fn minimize_mode_prefers_lower_values() {
        let pts = [pt("a", 10, 5.0), pt("b", 20, 4.0), pt("c", 30, 6.0)];
        let f = pareto_frontier(&pts, MemoryMetric::Bits, MetricMode::Minimize).unwrap();
        let labels: Vec<_> = f.frontier.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["a", "b"]);
    }

    #[test]
    fn memory_metric_selects_column() {
        let a = CompressionPoint::new("a", 100, 10, 0.8);
        let b = CompressionPoint::new("b", 50, 20, 0.8);
        let by_bits = pareto_frontier(&[a.clone(), b.clone()], MemoryMetric::Bits, MetricMode::Maximize).unwrap();
        let by_nz = pareto_frontier(&[a, b], MemoryMetric::NonzeroParams, MetricMode::Maximize).unwrap();
        assert_eq!(by_bits.frontier[0].label, "b");
        assert_eq!(by_nz.frontier[0].label, "a");
    }

    #[test]
    fn invalid_inputs() {
        assert!(pareto_frontier(&[], MemoryMetric::Bits, MetricMode::Maximize).is_err());
        assert!(pareto_frontier(&[pt("a", 0, 0.5)], MemoryMetric::Bits, MetricMode::Maximize).is_err());
        assert!(pareto_frontier(&[pt("a", 1, f64::NAN)], MemoryMetric::Bits, MetricMode::Maximize).is_err());
    }

    #[test]
    fn agrees_with_quadratic_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..40);
            let pts: Vec<_> = (0..n)
                .map(|i| {
                    let l = format!("p{}", rng.random_range(0..n * 2) + i % 2);
                    pt(&l, rng.random_range(1..12), rng.random_range(0..8) as f64 / 8.0)
                })
                .collect();
            for mode in [MetricMode::Maximize, MetricMode::Minimize] {
                let f = pareto_frontier(&pts, MemoryMetric::Bits, mode).unwrap();
                let expect: Vec<_> = oracle(&pts, mode).into_iter().map(|i| pts[i].clone()).collect();
                assert_eq!(f.frontier, expect);
            }
        }
    }

    proptest! {
        #[test]
        fn frontier_properties(raw in prop::collection::vec((1u64..50, 0u32..20, 0u8..5), 1..60)) {
            let pts: Vec<_> = raw.iter().map(|&(m, a, l)| pt(&format!("l{l}"), m, a as f64 / 20.0)).collect();
            let f = pareto_frontier(&pts, MemoryMetric::Bits, MetricMode::Maximize).unwrap();
            prop_assert_eq!(f.frontier.len() + f.dominated.len(), pts.len());
            for a in &f.frontier {
                for b in &f.frontier {
                    prop_assert!(!dominates(a, b, MemoryMetric::Bits, MetricMode::Maximize));
                }
            }
            prop_assert!(f.frontier.windows(2).all(|w| w[0].memory_bits < w[1].memory_bits));
            let mut all: Vec<_> = f.frontier.iter().chain(&f.dominated).map(|p| (p.label.clone(), p.memory_bits, p.accuracy.to_bits())).collect();
            let mut input: Vec<_> = pts.iter().map(|p| (p.label.clone(), p.memory_bits, p.accuracy.to_bits())).collect();
            all.sort();
            input.sort();
            prop_assert_eq!(all, input);
        }
    }
}
