//! Simulation of stochastic binary-interaction agent systems and discovery of
//! their drift and diffusion kernels from trajectory data.

pub mod basis;
pub mod design;
pub mod discover;
pub mod dynamics;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod presets;
pub mod qp;
pub mod rng;

pub use error::{Error, Result};
