//! Neural networks for conditional denoising and operator learning.

pub mod checkpoint;
pub mod error;
pub mod expert;
pub mod fno;
pub mod layers;
pub mod ops;
pub mod params;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
