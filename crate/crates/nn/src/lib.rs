//! Reverse-mode automatic differentiation over `ndarray`, sized for small
//! vision models and MLP policies that train on a single CPU core.
//!
//! The centerpiece is [`Graph`], a tape that records ops as nodes and walks
//! them backwards to accumulate gradients. Parameters live outside the tape
//! in a [`ParamStore`] so a fresh graph can be built every step (define-by-run).
//! All computation is `f64`; finite-difference checks against the tape are
//! part of this crate's contract (see [`check`]).

pub mod archive;
pub mod check;
pub mod graph;
pub mod layers;
pub mod optim;

pub use archive::Archive;
pub use graph::{Graph, ParamId, ParamStore, Tensor};
pub use layers::{Conv2d, Linear};
pub use optim::Adam;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("archive format error: {0}")]
    Archive(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
