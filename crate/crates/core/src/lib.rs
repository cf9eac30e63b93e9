//! Two-stream pyramid cross-fusion transformer for expression recognition,
//! built on a small reverse-mode autodiff tape.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense `f64` arrays, the tape, and
//!   finite-difference checking.
//! - [`attention`], [`encoder`]: self-attention, cross-fusion attention with
//!   swapped queries, encoder blocks, drop path and stacks.
//! - [`model`]: pyramid assembly, the six architecture variants, parameter
//!   and FLOP accounting, checkpoints.
//! - [`training`], [`metrics`]: label-smoothing loss, Adam, train/eval loops,
//!   confusion matrices.
//! - [`relevance`]: gradient-weighted attention rollout and PGM rendering.
//! - [`data`]: synthetic two-stream datasets and the feature file format.

pub mod attention;
mod binio;
pub mod checkpoint;
pub mod context;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod relevance;
pub mod tensor;
pub mod training;

pub use error::{Error, FormatError, Result};
pub use graph::{Graph, TensorId};
pub use tensor::Tensor;
