//! Tubelet-based video action detection on synthetic videos: a proposal
//! network over clip volumes, short-term attention with context erasing,
//! long-term graph propagation across neighboring clips, tubelet linking,
//! and mAP evaluation.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod layers;
pub mod linking;
pub mod long_term;
pub mod model;
pub mod records;
pub mod short_term;
pub mod tensor;
pub mod tpn;
pub mod train;

pub use error::{Error, Result};
