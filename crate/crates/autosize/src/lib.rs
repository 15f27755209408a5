//! Group-sparse proximal operators and an auto-sizing trainer for small
//! encoder-decoder transformers.
//!
//! The library trains sequence-to-sequence models while a group regularizer
//! (row Euclidean norm or row maximum) drives whole parameter rows to exact
//! zero, so the architecture shrinks during a single training run instead of
//! being fixed up front. Zeroed feed-forward units can afterwards be pruned
//! into a genuinely smaller model that computes the same function.
//!
//! Layering, bottom up:
//!
//! * [`scan`]: sorting and inclusive-scan primitives with a fixed
//!   combination order (results independent of worker count);
//! * [`prox`]: the row proximal operators, one data-parallel route built on
//!   the scans and one serial reference route kept deliberately independent;
//! * [`tensor`] and [`graph`]: the dense value type and the reverse-mode
//!   tape over it;
//! * [`model`], [`data`], [`train`]: the transformer, synthetic corpora,
//!   and the proximal training loop;
//! * [`sizing`], [`search`]: row censuses with structural pruning, and the
//!   three-arm search protocol;
//! * [`checkpoint`], [`config`], [`records`], [`commands`]: the on-disk
//!   formats and the command layer behind the `autosize` binary.
//!
//! Run `cargo run --example <name>` for end-to-end walkthroughs; the
//! `autosize` binary exposes the same capabilities as subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod prox;
pub mod records;
pub mod scan;
pub mod search;
pub mod sizing;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use prox::{
    l1_ball_project, l21_prox_row, linf_prox_row, linf_prox_row_serial, prox_step_matrix,
    regularizer_value, ProxStepSize, RegKind,
};
pub use tensor::{Scalar, Tensor};
