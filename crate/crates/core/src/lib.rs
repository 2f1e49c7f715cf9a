//! Slimmable neural video codec.
//!
//! One weight-nested model serves five rate-distortion operating points.
//! Inter frames transmit only the residual between consecutive quantized
//! latents, coded under a Gaussian whose parameters come from a hyperprior
//! over the frame pair and a temporal prior over the previous latent.

pub mod codec;
pub mod entropy;
pub mod error;
pub mod io;
pub mod params;
pub mod profile;
pub mod rangecoder;
pub mod slim;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
