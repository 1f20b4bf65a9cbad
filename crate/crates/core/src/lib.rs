//! Attention-based audio-visual sequence recognizer with learned per-step
//! modality fusion, plus the synthetic two-stream corpus, training recipe and
//! evaluation tooling used to exercise it.

pub mod attention;
pub mod autodiff;
pub(crate) mod binio;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rnn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
