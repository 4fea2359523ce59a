//! Algorithms for decadal land-cover imperviousness forecasting.
//!
//! The crate is `no_std` and only needs an allocator. Everything here is a
//! pure function of its inputs (plus an explicit RNG where sampling is
//! involved); file formats, run manifests and the command line live in the
//! `impervia` companion crate.
//!
//! Module map:
//!
//! * [`raster`]: the [`Grid`](raster::Grid) currency, tiling, block
//!   aggregation and change maps.
//! * [`transition`]: LULC cross-tabulation, pervious/impervious collapse and
//!   imperviousness likelihood maps.
//! * [`diffusion`]: noise schedule, forward process, training loop and the
//!   DDPM/DDIM samplers.
//! * [`denoiser`]: the conditional UNet noise predictor with its reverse-mode
//!   gradients.
//! * [`clustering`]: temporal signatures, DTW, k-medoids and reverse
//!   weighting.
//! * [`camarkov`]: the CA-Markov baseline.
//! * [`evaluation`]: multi-scale MAE, null resolution, seed statistics and
//!   confusion metrics.
//! * [`split`]: target/conditioning year selection.
//! * [`synthetic`]: seeded synthetic rasters used by tests and demos.
#![no_std]

extern crate alloc;

pub mod camarkov;
pub mod clustering;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod evaluation;
pub mod interp;
pub mod raster;
pub mod split;
pub mod synthetic;
pub mod transition;

pub use error::{Error, Result};
