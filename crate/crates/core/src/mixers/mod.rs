//! The nine linear-time token mixers behind one state-update interface:
//! a sequential scan, an unrolled quadratic reference, a chunked path for
//! the decay family, and a differentiable graph form for training.

mod chunked;
pub mod graph;
mod kind;
mod lattice;
mod oracle;
mod params;
mod scan;
mod step;
mod suite;

pub use chunked::{scan_chunked, scan_chunked_head};
pub use kind::{Dimensions, MixerKind, StateForm};
pub use lattice::{delta_projector, lattice_trial, projector_spectrum, LatticeErrors};
pub use oracle::{oracle_head, oracle_unrolled};
pub use params::{compute_gates, retnet_gammas, GateProjection, MixerParams};
pub use scan::{join_heads, prepare, scan, scan_head, scan_head_with, HeadSequence, HeadStep};
pub use step::{init_state, step, GateSet, MixerState, TokenProjection, KEY_NORM_TOLERANCE};
pub use suite::{oracle_trial, TrialBounds};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MixerError {
    #[error("unknown mixer kind `{0}`")]
    UnknownKind(String),
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("{kind} is single-head, got {heads} heads")]
    SingleHead { kind: MixerKind, heads: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("delta-rule key must be unit norm, got norm {0}")]
    KeyNotNormalized(f64),
    #[error("gate {name} = {value} outside [0, 1]")]
    GateOutOfRange { name: &'static str, value: f64 },
    #[error("gate {0} missing for this kind")]
    MissingGate(&'static str),
    #[error("sequence must contain at least one token")]
    EmptySequence,
    #[error("{op} does not support {kind}")]
    Unsupported { kind: MixerKind, op: &'static str },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("recurrence produced a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}
