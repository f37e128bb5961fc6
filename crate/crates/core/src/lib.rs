//! Core numerics for compositional diffusion on coupled PDE fields.
//!
//! This crate holds everything that does not need a neural-network backend:
//! grid and field types, the diffusion noise schedule and its algebra, the
//! finite-difference ground-truth solvers, Gaussian random field sampling,
//! the on-disk dataset container, the symmetric product-of-experts sampler,
//! and the evaluation metrics.

pub mod composer;
pub mod container;
pub mod dataset;
pub mod ddpm;
pub mod error;
pub mod grf;
pub mod grid;
pub mod heatmap;
pub mod metrics;
pub mod schedule;
pub mod seeds;
pub mod systems;

pub use error::{Error, Result};
pub use grid::{Boundary, Field, FieldSet, GridSpec, SystemId};
pub use schedule::NoiseSchedule;
