//! Underdamped Langevin sampling with an adaptively optimised friction matrix.
//!
//! The crate is `no_std` with `alloc`. File formats, configuration and the
//! command-line driver live in the `frictuner` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analytic;
pub mod error;
pub mod friction_opt;
pub mod galerkin;
pub mod integrators;
pub mod linalg;
pub mod rng;
pub mod sampler;
pub mod observables;
pub mod targets;
pub mod variance;

pub use error::{Error, Result};
