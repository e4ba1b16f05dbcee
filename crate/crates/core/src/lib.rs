//! Layout-guided large-canvas generation on an exact Gaussian-mixture scene
//! model.
//!
//! A small canvas is sampled conditionally on a box layout, upsampled,
//! inverted into a trajectory of noisy references, and then used to steer the
//! early steps of unconditional sampling on the large canvas.

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod grid;
pub mod guidance;
pub mod io;
pub mod pipeline;
pub mod sampler;
pub mod scene;
pub mod schedule;
pub mod spectral;

pub use error::{Error, Result};
pub use grid::{seeded_rng, GaussianSource, LatentGrid, SeededRng, Shape, ZeroNoise};
