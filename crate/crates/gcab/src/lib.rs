//! Exemplar-free class-incremental learning with a gated class-attention
//! decoder on a small Vision Transformer, built on a from-scratch
//! reverse-mode autodiff tape.
//!
//! The pieces, bottom up:
//! - [`tensor`] / [`tape`]: a 2-D tensor type and the gradient tape.
//! - [`optim`]: Adam with per-entry gradient gates (frozen units stay
//!   bitwise unchanged).
//! - [`vit`]: patch embedding and the pre-norm transformer encoder.
//! - [`masks`]: learned sigmoid task masks, their annealing schedule,
//!   cumulative unions, sparsity loss, and derived per-weight gates.
//! - [`gcab`]: the gated class-attention decoder block and per-task heads.
//! - [`pfr`]: drift projectors, the cosine feature regularizer, and the
//!   inference-time projector cascade.
//! - [`state`] / [`harness`]: the class-incremental protocol itself.
//! - [`distill`]: post-hoc compression of the multi-pass decoder into a
//!   single class-attention block.
//! - [`data`], [`config`], [`checkpoint`], [`par`]: datasets, TOML
//!   configs, binary checkpoints, and batch parallelism.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gcab;
pub mod harness;
pub mod masks;
pub mod optim;
pub mod par;
pub mod pfr;
pub mod state;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
