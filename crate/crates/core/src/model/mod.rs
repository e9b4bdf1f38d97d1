//! Decoder-only transformer: configuration, parameter accounting,
//! checkpoints, a differentiable forward pass and cached generation.

mod checkpoint;
mod config;
mod decode;
mod forward;

pub use checkpoint::*;
pub use config::{count_params, fit_embedding_mass, param_breakdown, predict_params, ModelConfig, ParamBreakdown};
pub use decode::{argmax, generate, Decoder, Generation};
pub use forward::{
    check_tokens, forward, forward_graph, forward_with, lm_loss, ForwardOptions, ForwardOutput, GraphForward,
    HookRecord, HookSite, NormTap, TokenBatch,
};
