//! A small numerical lab for a one-layer, single-head Transformer trained
//! with SGD on synthetic orthogonal-pattern token data.
//!
//! The crate trains the model from scratch with hand-written backpropagation,
//! then inspects the weight updates: their singular spectra, how well rank-`r`
//! truncations of them keep test performance, how they project onto the
//! data-generating patterns, and what magnitude pruning of the hidden layer
//! does to generalization. [`pipeline`] ties everything together and writes
//! the CSV/JSON artifacts; the `lowrank-lab` binary is a thin CLI over it.

pub mod analysis;
pub mod config;
pub mod datagen;
pub mod error;
pub mod gradients;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
