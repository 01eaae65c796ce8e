//! Model backends and the autoregressive decode loop with the bias hook.

mod mock;
mod remote;
mod session;
mod synthetic;

use thiserror::Error;

use crate::token_space::TokenDistribution;

pub use mock::{MockError, MockLM, MockRow, MockScript};
pub use remote::{
    remote_step, validate_response, RemoteBackend, RenormalizePolicy, WireContext, WireRequest,
    WireResponse, WireToken,
};
pub use session::{
    decode, default_top_n, DecodeError, DecodeOptions, Generation, ReplayMismatch, StepRecord,
    StopReason, Transcript, DEFAULT_STOP_PIECES,
};
pub use synthetic::SyntheticLM;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend reported unnormalized probabilities and local renormalization is off")]
    NotNormalized,
    #[error("no script for context ending in {0:?}")]
    Unscripted(String),
    #[error("invalid distribution from backend: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapability {
    /// Context length in characters the backend accepts; `None` if unbounded.
    pub max_context: Option<usize>,
    /// Largest top-n slice the backend will return.
    pub max_top_n: usize,
    /// Probabilities are a full-vocabulary softmax.
    pub normalized: bool,
    /// Vocabulary size when known.
    pub vocab_size: Option<usize>,
}

/// Produces next-token distributions.
///
/// `step` returns a top slice sorted by descending probability, with
/// probabilities taken from a full-vocabulary softmax and holding at least
/// `min(top_n, vocab size)` entries.
pub trait ModelBackend: Send + Sync {
    fn capability(&self) -> BackendCapability;

    fn step(&self, context: &str, top_n: usize) -> Result<TokenDistribution, BackendError>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn capability(&self) -> BackendCapability {
        (**self).capability()
    }

    fn step(&self, context: &str, top_n: usize) -> Result<TokenDistribution, BackendError> {
        (**self).step(context, top_n)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for Box<B> {
    fn capability(&self) -> BackendCapability {
        (**self).capability()
    }

    fn step(&self, context: &str, top_n: usize) -> Result<TokenDistribution, BackendError> {
        (**self).step(context, top_n)
    }
}
