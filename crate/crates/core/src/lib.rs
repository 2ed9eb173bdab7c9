//! Dual-stream (static/dynamic) graph alignment for temporal video grounding.
//!
//! Everything runs on a small reverse-mode autodiff tape over row-major
//! `f64` matrices; see [`tape`].

pub mod cli;
pub mod data;
pub mod dsgn;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod params;
pub mod proposals;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
