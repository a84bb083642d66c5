//! Downlink co-frequency interference mitigation at a satellite user-terminal
//! planar array.
//!
//! The crate covers the whole pipeline: seeded interference scenarios
//! ([`scenario`]), snapshot synthesis ([`signals`]), classical beamformers and
//! SINR metrics ([`beamform`]), a small reverse-mode differentiation engine
//! ([`autodiff`]), the recurrent neural beamformer ([`model`]) and its
//! self-supervised training loop ([`training`]).

pub mod autodiff;
pub mod beamform;
pub mod cli;
pub mod error;
mod linalg;
pub mod model;
pub mod scenario;
pub mod seed;
pub mod signals;
pub mod training;

pub use error::{Error, Result};
pub use nalgebra;
pub use num_complex::Complex64;
