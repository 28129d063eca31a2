//! Uniform k-bit quantization, global magnitude pruning with recovery, and
//! their combination.

mod combine;
mod prune;
mod quant;
mod recover;

pub use combine::{
    combine_prune_quantize, compressed_memory_bits, prune_sweep, quantize_model, schedule_to, CompressedModel,
    PrunedLevel, QuantizedModel, FULL_PRECISION_BITS, QUANT_OVERHEAD_BITS,
};
pub use prune::{
    count_nonzero_weights, is_prunable, nonzero_count, prune_global, PruneScope, PruneState, PRUNE_SCHEDULE,
};
pub use quant::{
    dequantize, pack_indices, packed_len, quantize_tensor, unpack_indices, QuantizationSpec, QuantizedTensor, MAX_BITS,
};
pub use recover::{iterative_prune_with_recovery, RecoveryConfig, RecoveryLevel, RECOVERY_RATIO};
