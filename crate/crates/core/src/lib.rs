//! Heterogeneous interaction learning for click-through-rate prediction.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] - dense 2-D `f64` tensors and a tape-based reverse-mode
//!   autodiff graph. Everything else builds on this.
//! * [`nn`] - the flat parameter registry plus linear/MLP building blocks.
//! * [`data`] - feature schemas, raw examples, a synthetic data generator
//!   and CSV persistence.
//! * [`pipeline`] - embedding of raw examples and the masked sequence
//!   unification that produces per-example feature matrices.
//! * [`interaction`] - non-sequence interaction backbones (pairwise dot,
//!   factorization machines, deep-cross layers, ensemble layers).
//! * [`sequence`] - attention over behavior sequences: multi-head attention,
//!   learned-seed pooling, rotary positions, and the per-layer block.
//! * [`cross`] - compact bidirectional summaries exchanged between the
//!   interaction and sequence branches.
//! * [`model`] - configuration, parameter storage and the full forward pass.
//! * [`checkpoint`] - versioned binary serialization of trained models.
//! * [`train`] - Adam, the training loop, and ranking/calibration metrics.
//! * [`gradcheck`] - finite-difference verification of every differentiable
//!   operation, runnable from the CLI as well as from tests.

pub mod checkpoint;
pub mod cross;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interaction;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod sequence;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, NodeId, Tensor};
