//! Two-tower bidirectional transformer pretraining with a cloze objective.
//!
//! The crate is organized around the pipeline:
//!
//! ```text
//! text corpus → vocab/BPE → examples → batches
//!            → two-tower model (forward + backward masked self-attention)
//!            → combination layer (target-masked) → classifier
//!            → cloze / bilm / triplet losses → NAG pretraining
//!            → fine-tuning heads (classification, regression, pairs, tagging)
//! ```
//!
//! `tensor` supplies the reverse-mode autodiff substrate everything else is
//! built on, including a finite-difference gradient-check oracle. `check`
//! hosts the invariant suites (leak-freedom, causality, gradients) that the
//! CLI exposes as `cloze check`.

pub mod check;
pub mod cli;
pub mod finetune;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod text;
pub mod trainer;

/// Crate-wide error type.
///
/// The CLI maps `Config` to exit code 2 and everything else to exit code 1,
/// matching the documented scripting contract.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
