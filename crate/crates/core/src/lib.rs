//! Numerical core of the cross-domain liveness translation pipeline:
//! tensors, autodiff, networks, losses, the two-stage trainer and metrics.
#![no_std]
extern crate alloc;

pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
pub mod synthdomain;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
