//! Surface reconstruction from colour event streams.
//!
//! A signed distance network and a radiance network are fitted so that
//! differences of volume-rendered log intensities match accumulated events.
//! The crate covers the whole path from a synthetic scene to an evaluated
//! mesh:
//!
//! - [`scenegen`]: analytic scenes, spiral trajectories, ground-truth renders
//! - [`events`]: event simulation, accumulation, windows, Bayer filter
//! - [`encodings`]: annealed positional encoding, spherical harmonics
//! - [`fields`]: the two networks on a small reverse-mode engine
//! - [`renderer`]: rays, SDF opacities, importance sampling, compositing
//! - [`training`]: event and Eikonal losses, optimiser, training loop
//! - [`meshing`]: grid baking, marching cubes, vertex colours, OBJ/PLY
//! - [`metrics`]: Chamfer distance, SDF error, masked PSNR

pub mod encodings;
pub mod error;
pub mod events;
pub mod fields;
pub mod imaging;
pub mod meshing;
pub mod metrics;
pub mod renderer;
pub mod scenegen;
pub mod training;

pub use error::{Error, Result};
