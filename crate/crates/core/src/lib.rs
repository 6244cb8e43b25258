//! Dual-stream transformer language model.
//!
//! The residual stream is split into a token stream, written only by
//! attention, and a context stream, written only by the feed-forward blocks.
//! Value/output/up/down projections use a configurable mixing strategy
//! (identity, independent per-head, Kronecker head routing, or dense) so the
//! amount of cross-head communication is an explicit design choice.
//!
//! In frozen-token-stream mode the token stream stays equal to the input
//! embeddings at every depth and attention writes into the context stream
//! instead. Embeddings still train through the attention inputs.
//!
//! The crate contains its own small reverse-mode autodiff engine
//! ([`tensor`]), the model ([`model`]), a byte-level BPE tokenizer
//! ([`data`]), AdamW training ([`train`]) and diagnostics ([`diag`]):
//! attention amplification sweeps, stream ablations, head specialization and
//! Kronecker routing export.

pub mod attention;
pub mod config;
pub mod data;
pub mod diag;
pub mod error;
pub mod ffn;
pub mod mixing;
pub mod model;
pub mod norm;
pub mod params;
pub mod real;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use data::{Batch, BpeVocab};
pub use mixing::{MixingLinear, MixingSignature, MixingStrategy};
pub use model::{ForwardOptions, Model, ModelConfig, StreamMode};
pub use params::{Graph, ParamId, ParamStore};
pub use real::Real;
pub use tensor::{NodeId, Tape, Tensor};
