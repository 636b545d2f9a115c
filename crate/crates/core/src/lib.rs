//! Select-and-rerank visual question answering.
//!
//! A base classifier proposes the top-N answers for an (image, question)
//! pair, each candidate is fused with the question into a short caption,
//! and a small cross-attention entailment scorer picks the caption the
//! image supports best. Everything runs on a synthetic world whose answer
//! priors shift between train and test, which makes prior reliance
//! measurable.

// Bound checks are written `!(x >= 0.0)` on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod captions;
pub mod cas;
pub mod config;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod qtd;
mod rng;
pub mod synthworld;
pub mod ve;

pub use error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
