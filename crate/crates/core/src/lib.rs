pub mod audio;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod skeleton;

pub use error::{Error, Result};
