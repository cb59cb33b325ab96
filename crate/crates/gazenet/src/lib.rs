//! Capsule-network gaze estimator for 36x60 grayscale eye patches.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]), capsule layers with routing-by-agreement ([`layers`]), the
//! margin/reconstruction/gaze objective ([`losses`]), the assembled network
//! ([`model`]), dataset handling plus a synthetic-eye generator ([`data`]),
//! and training, evaluation, transfer learning and checkpointing
//! ([`train`]).

pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, ValueId};
