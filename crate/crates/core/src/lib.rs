//! Conditional wavelet flows for reconstructing fluorescence volumes from
//! light-field microscope images.
//!
//! The crate is organized bottom-up: [`numerics`] provides tensors,
//! reverse-mode gradients and the optimizer; [`haar`] and [`flow`] are the
//! invertible building blocks; [`cwfa`] assembles them into the multiscale
//! model; [`optics`] simulates the microscope and produces data; [`metrics`]
//! and [`ood`] evaluate reconstructions and flag unfamiliar samples.

pub mod archive;
pub mod cwfa;
pub mod error;
pub mod flow;
pub mod haar;
pub mod metrics;
pub mod numerics;
pub mod ood;
pub mod optics;

pub use error::{Error, Result};
