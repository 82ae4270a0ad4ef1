//! Gated-attention transformer encoder with an MLM head.

pub mod checkpoint;
pub mod config;
pub mod encoder;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::ModelConfig;
pub use encoder::{
    pooled_representation, EncoderModel, ForwardTrace, GateMode, HeadParams, LayerParams,
    ParamVars, TokenBatch,
};
