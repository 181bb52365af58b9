//! Training-free, reference-guided sketch generation on top of a pluggable
//! latent-diffusion backend.
//!
//! A content image is turned into a sketch that borrows the stroke texture of
//! a reference image. The generation loop mixes the reference's cached
//! self-attention keys and values into the content's denoising trajectory,
//! restricted to a foreground mask derived from clustered attention, with the
//! content's contour steering the queries.

pub mod attention;
pub mod backends;
pub mod config;
pub mod dam;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod inversion;
pub mod pipeline;
pub mod schedule;
pub mod sdpe;
pub mod spm;

pub use backends::Backends;
pub use config::{PipelineConfig, StepWindow};
pub use dam::ForegroundMask;
pub use error::{Error, Result};
pub use imaging::Image;
pub use inversion::InversionTrace;
pub use pipeline::{ablate, generate_sketch, Module, SketchResult};
