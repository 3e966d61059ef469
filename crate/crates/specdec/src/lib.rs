//! Speculative decoding laboratory.
//!
//! A draft model proposes tokens, a target model verifies them with the
//! rejection-sampling scheme, and a pluggable lookahead policy decides after
//! every drafted token whether to keep drafting or hand over for
//! verification. The crate bundles:
//!
//! - [`dist`]: token-level probability distributions and the scalar
//!   functions (entropy, top-k, total-variation distance, residual
//!   distribution) everything else consumes.
//! - [`models`]: toy character-level language models — smoothed n-grams with
//!   stupid backoff and a fully scripted table model for exact tests.
//! - [`engine`]: the generation loops (autoregressive, speculative, oracle)
//!   with exact forward-pass accounting.
//! - [`policies`]: the lookahead policies — static, acceptance-rate
//!   heuristic, perplexity threshold, and the trained halting classifier.
//! - [`classifier`]: feature extraction, a from-scratch 2-layer FFN with
//!   backprop, and F1 evaluation.
//! - [`analytics`]: the improvement-factor cost model and oracle lookahead
//!   statistics.
//! - [`harness`]: corpus splits, hyperparameter tuning, policy comparison
//!   runs, and report emission; batch generation runs in parallel when the
//!   `parallel` feature (default) is enabled.

pub mod analytics;
pub mod classifier;
pub mod dist;
pub mod engine;
pub mod harness;
pub mod models;
pub mod policies;

pub use dist::{ProbDist, TokenId};
pub use engine::{GenerationConfig, IterationRecord, RunTrace};
pub use models::{ModelPair, NGramModel, ScriptedModel, Vocab};
pub use policies::SpeculationPolicy;

use thiserror::Error;

/// Errors shared across the crate's modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid probability distribution: {0}")]
    InvalidDist(String),
    #[error("vocabulary mismatch: {0} vs {1} entries")]
    VocabMismatch(usize, usize),
    #[error("zero residual mass: distributions are identical")]
    ZeroResidual,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown symbol {0:?} not in vocabulary")]
    UnknownSymbol(char),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss at epoch {0}; learning rate likely too large")]
    DivergentTraining(usize),
    #[error("oracle mode requires temperature 0, got {0}")]
    OracleNeedsGreedy(f64),
    #[error("corpus too small: need {need} prompts, have {have}")]
    CorpusTooSmall { need: usize, have: usize },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
