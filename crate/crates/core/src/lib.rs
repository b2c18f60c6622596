//! Core of the synthetic-clutter visuomotor learning lab.
//!
//! Everything here is allocation-only and free of IO: a planar-arm tabletop simulator and
//! renderer, sprite compositing for the augmented observation classes, a small reverse-mode
//! autodiff engine, the vision networks with their adversarial and reconstruction losses, the
//! task-focused attention module, the mixture-density recurrent controller and the training and
//! rollout steps built from them.
#![no_std]

extern crate alloc;

pub mod augment;
pub mod ea;
pub mod error;
pub mod graph;
pub mod losses;
pub mod model;
pub mod motor;
pub mod nets;
pub mod nn;
pub mod policy;
pub mod real;
pub mod sim;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
