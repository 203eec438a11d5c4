pub mod autograd;
pub mod classifier;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod imageio;
pub mod mixer;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod shapes;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
