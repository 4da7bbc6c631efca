//! The unified search space: per-stage choices and their token encoding,
//! resolution against a reference base, the bundled model family, and
//! materialisation of executable networks.

mod network;
mod resolve;
mod space;
mod spec;

pub use network::{materialize, Network, INPUT_CHANNELS};
pub use resolve::{
    b0_choices, compound_scale, family, micro_spec, recover_choices, resolve, round_channels, stem_for, ModelId,
    ReferenceBase,
};
pub use space::{
    detokenize, space_size, tokenize, SpaceSize, StageChoice, TokenSequence, ARITIES, CHANNEL_MULTS, DECISIONS_PER_STAGE,
    DECISION_NAMES, NUM_STAGES, REPEAT_DELTAS,
};
pub use spec::{ArchitectureSpec, HeadSpec, StageSpec, StemSpec, SCHEMA_VERSION, TOTAL_STRIDE};

use thiserror::Error;

use crate::nn::ModelError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArchError {
    #[error("invalid token: {0}")]
    Token(String),
    #[error("value outside search domain: {0}")]
    Domain(String),
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("malformed architecture JSON at line {line}, column {column}: {msg}")]
    Json { line: usize, column: usize, msg: String },
    #[error("unknown model id {0:?}, expected b0..b6")]
    UnknownModel(String),
    #[error("invalid scaling: {0}")]
    Scale(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
