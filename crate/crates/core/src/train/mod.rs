//! Optimization, learning-rate schedules, FLOP accounting and cost metering.

mod finetune;
mod flops;
mod meter;
mod optim;
mod pretrain;
mod schedule;

pub use finetune::{accuracy, finetune_classifier, ClassifierTrainer, FinetuneConfig, FinetuneReport};
pub use flops::{flops_per_step, forward_flops, head_forward_flops, layer_forward_flops};
pub use meter::{Clock, CostMeter, StepTimer, CALIBRATION_SKIP, CALIBRATION_WINDOW};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use pretrain::{
    accumulate_units, evaluate_loss, evaluate_perplexity, mlm_step, train_mlm, train_mlm_until, CurvePoint,
    TrainConfig, TrainState,
};
pub use schedule::{batch_lr_lookup, lr_schedule, BATCH_LR_TABLE};
