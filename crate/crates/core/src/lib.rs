//! Two-stage optimization of 2D Gaussian splat image fits.
//!
//! The exploration stage runs an adaptively weighted Langevin sampler that
//! flattens the loss landscape over energy bins; the exploitation stage feeds
//! per-primitive L-BFGS directions for the positions into Adam.

pub mod adam;
pub mod awsgld;
pub(crate) mod codec;
pub mod density;
pub mod error;
pub mod image;
pub mod landscape;
pub mod loss;
pub mod lqnadam;
pub mod model;
pub mod render;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use image::Image;
pub use model::{Gaussian2D, GaussianCloud};
