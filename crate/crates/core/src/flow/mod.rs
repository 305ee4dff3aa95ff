//! Invertible multiscale 3D flow.
//!
//! Each level squeezes the volume (2x2x2 blocks into channels), applies
//! `depth` steps of actnorm, invertible 1x1x1 convolution and affine
//! coupling, then splits off half of the channels as that level's latent.
//! The emitted half is scored under a Gaussian whose mean and log-scale are
//! predicted from the kept half; the top level uses a learned prior.

pub mod checkpoint;
mod config;
pub mod layers;
mod model;
mod pyramid;
pub mod squeeze;

pub use config::{Coupling, FlowConfig, Permutation};
pub use layers::{ActNorm, AffineCoupling, InvConv};
pub use model::{gaussian_log_density, parameter_layout, Binder, Encoded, Flow};
pub use pyramid::LatentPyramid;
