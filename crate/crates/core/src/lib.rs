pub mod bridge;
pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod deform;
pub mod error;
pub mod fit;
pub mod gaussians;
pub mod image;
mod io_util;
pub mod kinematics;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod raster;
pub mod robot;
pub mod sh;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
