//! Analytic FLOP accounting. A multiply-accumulate counts as two FLOPs;
//! embedding lookups, normalization, activations and the softmax count as
//! zero. The backward pass costs twice the forward pass.

use crate::model::ModelConfig;

/// Forward FLOPs of one encoder layer over a sequence of `seq` tokens.
pub fn layer_forward_flops(cfg: &ModelConfig, seq: usize) -> u64 {
    let (s, h, f) = (seq as u64, cfg.hidden_size as u64, cfg.ffn_size as u64);
    let qkv = 2 * s * h * 3 * h;
    let scores = 2 * s * s * h;
    let context = 2 * s * s * h;
    let out = 2 * s * h * h;
    let ffn = 2 * s * h * f * 2;
    qkv + scores + context + out + ffn
}

/// Forward FLOPs of the masked-LM head over `seq` tokens.
pub fn head_forward_flops(cfg: &ModelConfig, seq: usize) -> u64 {
    let (s, h, v) = (seq as u64, cfg.hidden_size as u64, cfg.vocab_size as u64);
    2 * s * h * h + 2 * s * h * v
}

/// Forward FLOPs of one masked-LM sequence of length `seq`.
pub fn forward_flops(cfg: &ModelConfig, seq: usize) -> u64 {
    cfg.num_layers as u64 * layer_forward_flops(cfg, seq) + head_forward_flops(cfg, seq)
}

/// FLOPs of one gradient step over `batch` sequences: forward plus a
/// backward pass costing twice the forward.
pub fn flops_per_step(cfg: &ModelConfig, batch: usize, seq: usize) -> u64 {
    3 * forward_flops(cfg, seq) * batch as u64
}
