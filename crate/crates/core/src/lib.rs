//! Latent-space alignment toolkit for GAN inversion at desk scale.
//!
//! The crate bundles a differentiable miniature style-based generator, the
//! normalized style space and its cosine-distance metric, alignment-regularized
//! inversion (latent optimization and a trained encoder), latent editing with
//! a consistency metric, and numeric checks of the generator's scale
//! invariance and many-to-one properties.

pub mod adam;
pub mod alignment;
pub mod config;
pub mod editing;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod gradsuite;
pub mod inversion;
pub mod kernels;
pub mod latent;
pub mod linalg;
pub mod properties;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig};
pub use rng::RngState;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
