//! Region-routed mixture-of-experts action recognition over synthetic
//! skeleton-free video, built on a small reverse-mode autodiff core.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod analysis;
pub mod data;
pub mod encoders;
pub mod embeddings;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod m3e;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
