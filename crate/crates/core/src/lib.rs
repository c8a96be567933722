//! Tensorial radiance fields trained from motion-blurred images.
//!
//! Each blurry training pixel is explained as a weighted sum of sharp
//! renders along a short camera trajectory. The trajectory comes from a
//! continuous motion blur kernel: a latent state per ray, evolved through
//! the exposure by a learned ODE and decoded into cumulative pixel and
//! origin offsets. Rendering a novel view uses the original camera rays
//! only, which yields sharp images.

pub mod autodiff;
pub mod blur;
pub mod camera;
pub mod cmbk;
pub mod error;
pub mod field;
pub mod fsio;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
