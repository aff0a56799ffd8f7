//! Desk-scale identity-preserved portrait generation.
//!
//! A miniature latent diffusion model hosting a gated self-attention face
//! adapter between each transformer block's self- and cross-attention. The
//! adapter consumes identity tokens from a pluggable face encoder, training
//! regularizes the adapter's increment outside the face region, a drop /
//! same-identity-shuffle curriculum supplies the conditioning variants, and
//! sampling runs classifier-free guidance with optional masked inpainting.
//!
//! Everything is driven from the `faceadapt` CLI; the library exposes the
//! individual pieces for testing and embedding.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image_io;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
