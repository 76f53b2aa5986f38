//! Desk-scale unsupervised ASR personalisation.
//!
//! A synthetic shifted-speaker corpus, a miniature neural transducer with
//! LHUC layers, greedy/beam decoding, pseudo-label quality filters (CT,
//! DUST, NCM, oracle), the consistency-constraint self-training loop with
//! NST/EM/LHUC baselines, and WER/WERR reporting.

pub mod adapt;
pub mod augment;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod filter;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{Gradients, Tensor};
