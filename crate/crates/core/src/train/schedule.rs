use crate::error::{Error, Result};

/// Tuned peak learning rate per batch size (sequences per step).
pub const BATCH_LR_TABLE: [(usize, f64); 5] = [
    (256, 0.0002),
    (2048, 0.001),
    (4096, 0.00125),
    (8192, 0.0015),
    (16384, 0.001875),
];

pub fn batch_lr_lookup(batch_size: usize) -> Result<f64> {
    BATCH_LR_TABLE
        .iter()
        .find(|(b, _)| *b == batch_size)
        .map(|&(_, lr)| lr)
        .ok_or(Error::UnlistedBatchSize(batch_size))
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`. Steps past `total` get 0.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    peak * (total - step) as f64 / (total - warmup) as f64
}
