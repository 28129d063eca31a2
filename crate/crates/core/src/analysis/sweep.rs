use crate::error::{Error, Result};
use crate::train::CurvePoint;

/// A learning curve tagged with the model that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCurve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

/// Cost to first reach a target validation loss; `None` when never reached.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetCrossing {
    pub label: String,
    pub steps: Option<f64>,
    pub flops: Option<f64>,
    pub seconds: Option<f64>,
}

impl TargetCrossing {
    pub fn reached(&self) -> bool {
        self.steps.is_some()
    }
}

/// First crossing of `target` by linear interpolation between evaluation
/// points, after sorting by step. A curve already at or below the target at
/// its first evaluation reports that evaluation's coordinates.
pub fn first_crossing(curve: &LabeledCurve, target: f64) -> Result<TargetCrossing> {
    if curve.points.iter().any(|p| p.val_loss.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "curve {} contains a NaN loss",
            curve.label
        )));
    }
    let mut sorted = curve.points.clone();
    sorted.sort_by_key(|p| p.step);
    if sorted.windows(2).any(|w| w[0].step == w[1].step) {
        return Err(Error::InvalidArgument(format!("curve {} repeats a step", curve.label)));
    }
    let hit = sorted.iter().position(|p| p.val_loss <= target).map(|i| {
        let b = sorted[i];
        let (a, t) = if i == 0 {
            (b, 0.0)
        } else {
            let a = sorted[i - 1];
            (a, (a.val_loss - target) / (a.val_loss - b.val_loss))
        };
        let lerp = |x: f64, y: f64| x + t * (y - x);
        (
            lerp(a.step as f64, b.step as f64),
            lerp(a.flops, b.flops),
            lerp(a.seconds, b.seconds),
        )
    });
    Ok(TargetCrossing {
        label: curve.label.clone(),
        steps: hit.map(|h| h.0),
        flops: hit.map(|h| h.1),
        seconds: hit.map(|h| h.2),
    })
}

/// Steps, FLOPs and seconds each curve needs to reach `target`, in input
/// order.
pub fn sweep_aggregate(curves: &[LabeledCurve], target: f64) -> Result<Vec<TargetCrossing>> {
    curves.iter().map(|c| first_crossing(c, target)).collect()
}
