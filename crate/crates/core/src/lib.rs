//! Cross-stitched multimodal encoder: a from-scratch f64 implementation of
//! two-way multi-head cross-modal attention over a speech-frame encoder and a
//! text-token encoder, with token-tagging and utterance-classification heads,
//! a deterministic training loop, synthetic corpora, and evaluation metrics.

pub mod attention;
pub mod crossstitch;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod grad_check;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod training;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Param, ParamStore, Scope};
pub use rng::Rng;
pub use tensor::Tensor;
