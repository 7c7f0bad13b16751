//! Open-world temporal moment detection.
//!
//! A video (per-frame features) and a structured prompt of free-form queries
//! go in; temporal segments scored per query come out. Action categories and
//! event descriptions are handled by the same pipeline.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod loss;
pub mod model;
pub mod prompt;

pub use error::{Error, Result};
