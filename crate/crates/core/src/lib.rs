//! Object permanence through a random walk along a recurrent spatial memory.
//!
//! The crate trains a small ConvGRU memory network on procedurally generated
//! occlusion videos using labels of visible objects only, then localizes
//! fully hidden objects at inference time by walking a learned transition
//! graph over successive memory states.

pub mod cli;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tracker;
pub mod trainer;
pub mod walk;
pub mod worldgen;

pub use error::{Error, Result};
