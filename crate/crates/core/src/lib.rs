//! Style transfer by covariance matching in the feature space of an image
//! autoencoder, with a variational latent space in which several styles can
//! be blended by convex interpolation.

pub mod bench;
pub mod corpus;
pub mod error;
pub mod gemm;
pub mod iae;
pub mod imageio;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod variation;
pub mod vlt;

pub use error::{Error, Result};
pub use tensor::Tensor;
