//! Toolkit for efficient real-world image deblurring: model families under a
//! compute budget, the efficiency referee, training recipes, inference and
//! leaderboard scoring.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod data_io;
pub mod efficiency;
pub mod error;
pub mod fixtures;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod params;
pub mod reparam;
pub mod train;

pub use error::{Error, Result};
