//! Attention encoder and light decoder.
//!
//! The encoder turns node features into static embeddings once per
//! instance. The decoder then scores candidate nodes at every construction
//! step from a single context query, reusing those embeddings as keys and
//! values. Optional decoder upgrades (identity mapping, query feed-forward,
//! distance heuristic, alternative projections) are switched by
//! [`ModelConfig`].

mod config;
mod decoder;
mod encoder;
mod params;

pub use config::{ModelConfig, NormKind, QueryProjection};
pub use decoder::{decode_step, step_probabilities, StepBatch, StepOutput, DIST_EPS};
pub use encoder::{encode, Embeddings};
pub(crate) use encoder::Fnv64;
pub use params::{init_params, is_encoder_param, param_shapes, zero_params};

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::vrp::VrpError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Vrp(#[from] VrpError),
    #[error("non-finite activations in {stage}")]
    NonFinite { stage: String },
}

impl ModelError {
    /// Whether the failure is numeric (as opposed to bad input or config).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::NonFinite { .. } | ModelError::Numerics(NumericsError::NonFinite(_))
        )
    }
}
