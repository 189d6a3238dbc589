// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every pipeline stage.

use alloc::string::String;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Everything that can go wrong inside the pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up (or an operand is empty).
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A value is outside the domain of the operation (NaN, negative sigma, zero vector...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller supplied an invalid token sequence or similar input.
    #[error("input error: {0}")]
    Input(String),
    /// A configuration value violates its invariants.
    #[error("config error: {0}")]
    Config(String),
    /// The loss became non-finite.
    #[error("training diverged at step {step} (loss = {loss})")]
    Training { step: usize, loss: f32 },
    /// Noise probing retained no candidate vector.
    #[error(
        "refinement found no candidates after {batches} batches (max p = {max_probability:.4}, \
         sigma = {sigma}, tau = {tau}); lower sigma or tau"
    )]
    Refinement {
        batches: usize,
        max_probability: f32,
        sigma: f32,
        tau: f32,
    },
    /// The averaged targeting vector no longer predicts the concept token.
    #[error("refined target gives p(t_C) = {p_target:.4}, too far below tau = {tau}")]
    WeakTarget { p_target: f32, tau: f32 },
    /// Selection produced no rows to edit.
    #[error("empty candidate set: {0}")]
    EmptySelection(String),
    /// An operation was invoked with contradictory arguments.
    #[error("usage error: {0}")]
    Usage(String),
    /// Weights changed since an edit was recorded.
    #[error("integrity error: expected checkpoint hash {expected:016x}, found {found:016x}")]
    Integrity { expected: u64, found: u64 },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
