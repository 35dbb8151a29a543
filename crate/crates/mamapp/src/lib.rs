//! Training and evaluation stack for a small vision state-space model.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors plus tape-based reverse-mode autodiff over the
//!   primitive layers the network needs (conv, norms, activations, matmul,
//!   the selective-scan recurrence, ...). Generic over `f32`/`f64` so the
//!   same code paths can be gradient-checked in double precision.
//! - [`ssm`]: the selective state-space recurrence and the token-mixing block
//!   built on it (input projection, causal depthwise conv, gating).
//! - [`model`]: the full classifier (conv stem, stacked mixing blocks,
//!   pooled linear head), parameter initialisation, counting, checkpoints.
//! - [`data`]: dataset indexing from class-per-directory image trees,
//!   stratified splitting, image decoding/resizing, train-time augmentation,
//!   deterministic batch planning.
//! - [`train`]: label-smoothed cross-entropy, AdamW, and the training loop
//!   with per-epoch logging and best-checkpoint selection.
//! - [`eval`]: confusion-matrix metrics (micro/macro precision, recall, F1),
//!   penultimate-feature export, and a small exact PCA for projecting those
//!   features to 2-3 components.
//! - [`synth`]: a generator for small labelled image datasets, used by the
//!   integration tests and handy for smoke-testing the pipeline end to end.

pub mod data;
pub mod eval;
pub mod model;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod train;

mod util;

pub use util::{derive_seed, fnv1a64};

use thiserror::Error;

/// Top-level error: everything a pipeline run can fail with.
///
/// Callers that need process exit codes can use [`Error::is_numeric`] to
/// distinguish numerical failures (non-finite loss, singular decompositions)
/// from configuration/data problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{0}")]
    Msg(String),
}

impl Error {
    /// True when the failure is numerical (diverged optimisation, non-finite
    /// values, failed eigendecomposition) rather than bad input or config.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Train(train::TrainError::NonFinite { .. }) => true,
            Error::Tensor(tensor::TensorError::NonFinite { .. }) => true,
            Error::Model(model::ModelError::Tensor(tensor::TensorError::NonFinite { .. })) => true,
            Error::Eval(eval::EvalError::Numeric(_)) => true,
            _ => false,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
