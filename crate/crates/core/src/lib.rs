//! Simulation and analysis of light-induced charge noise in a dielectric
//! nanoguide, as seen through the spectral diffusion of nearby single
//! molecules.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: point-charge electrostatics and the quadratic Stark map.
//! - [`dynamics`]: Gillespie simulation of photo-activated charge jumps.
//! - [`spectro`]: synthetic laser sweeps with photon shot noise.
//! - [`fitters`]: Lorentzian, Gaussian, exponential and parabola fits.
//! - [`stats`]: spectral-diffusion statistics, the non-Gaussianity
//!   parameter and its inversion to a charge density.
//! - [`pipeline`]: the end-to-end simulate/synthesize/fit chain.
//! - [`io`]: self-describing columnar text artifacts.

pub mod dynamics;
pub mod error;
pub mod fitters;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod spectro;
pub mod stats;

pub use error::{Error, Result};
pub use model::Vec3;
