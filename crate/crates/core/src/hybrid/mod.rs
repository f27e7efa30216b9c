//! The interleaved network: embedding, repeated blocks of linear-mixer
//! layers followed by one full-attention layer, and a projection head.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use config::{build_schedule, cache_report, CacheReport, HybridConfig, LayerKind, LayerSchedule, Ratio};
pub use model::{forward, HybridModel, ModelGraph, ParamStore};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HybridError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token {token} out of range for vocabulary {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Mixer(#[from] crate::mixers::MixerError),
    #[error(transparent)]
    Attention(#[from] crate::attention::AttentionError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

#[cfg(test)]
mod tests;
