//! Quantization-aware distillation of a toy decoder-only language model.

mod config;
mod engine;
mod loss;
mod model;
mod optim;

pub use config::{DistillConfig, Scheme, ToyDecoderConfig};
pub use engine::{
    box_stats, distill, distill_step_grads, metrics_jsonl, nll_total, perplexity, pretrain, steps_per_epoch,
    trace_projection, validation_perplexity, BoxStats, FinalRecord, ProjectionTrace, StepRecord, TrainOutcome,
};
pub use loss::{
    ce_distill_loss, ce_distill_with_grad, l2l_loss, l2l_with_grad, next_token_nll_with_grad, nll_sum, total_loss,
};
pub use model::{Block, ForwardCache, ForwardOutput, FrozenWeights, Linear, ToyDecoder, PROJECTION_NAMES};
pub use optim::{adamw_step, cosine_lr, AdamWParams, TrainState};
