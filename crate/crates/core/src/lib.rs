//! Volumetric normalizing flows for longitudinal head imaging.
//!
//! The crate trains an invertible multiscale 3D flow by exact likelihood,
//! learns a per-level residual predictor in its latent space and composes
//! both into a recursive forecast operator. A synthetic head-phantom
//! generator with analytic ventricle volumes provides data and ground truth.

pub mod diffcore;
pub mod error;

pub use error::{Error, Result};
pub mod flow;

mod bytes;
mod par;
pub use bytes::sha256_file;
pub mod ingest;
pub mod seed;
pub mod train;
pub mod phantom;
pub mod temporal;
pub mod forecast;
pub mod quantify;
pub mod pipeline;
pub mod verify;
pub mod cli;
