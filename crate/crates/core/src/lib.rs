//! Encoder-only diffeomorphic image registration.
//!
//! A shallow convolutional encoder maps the moving and fixed images to
//! feature maps, a Laplacian feature pyramid of per-level flow estimators
//! predicts residual stationary velocity fields, and the residuals are
//! integrated with scaling-and-squaring and composed coarse to fine.

pub mod autodiff;
pub mod deform;
pub mod error;
pub mod grid;
pub mod io;
pub mod net;
pub mod objectives;
pub mod selfcheck;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
