//! Desk-scale laboratory for studying gradient inversion in federated learning.
//!
//! The crate is organised bottom-up: [`tensor`] and [`tape`] provide a small
//! dense-tensor autodiff engine whose backward pass emits differentiable graph
//! nodes, so gradients of gradients are exact. [`nn`] builds models on top of
//! it, [`fed`] simulates FedSGD/FedAVG clients and defenses, [`attack`]
//! reconstructs client data from shared updates, [`guide`] trains and applies
//! denoisers specialised to attack noise, and [`metrics`] scores the results.
//!
//! Everything is deterministic given the seeds threaded through the public
//! APIs: the same inputs produce bit-identical outputs regardless of the
//! thread count chosen in [`par`].

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod checkpoint;
pub mod error;
pub mod attack;
pub mod data;
pub mod fed;
pub mod guide;
pub mod metrics;
pub mod train;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
