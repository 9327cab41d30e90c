//! Class-incremental concept bottleneck models over precomputed features.
//!
//! The crate trains an interpretable classifier across a sequence of phases
//! that each introduce disjoint new classes. Per phase it expands a concept
//! vocabulary, fits a linear concept bottleneck with a cosine-cubed alignment
//! loss (optionally distillation-regularized against the previous bottleneck),
//! synthesizes pseudo-concepts for past classes from stored centroids, and
//! fits a sparse elastic-net softmax layer on top. No raw samples from past
//! phases are retained; only per-class centroids persist between phases.
//!
//! Numeric kernels are generic over the scalar type (see [`scalar::Scalar`]);
//! the pipeline itself runs at [`Real`] precision and stores tensors as
//! float32 on disk.

pub mod bottleneck;
pub mod concept;
pub mod config;
pub mod error;
pub mod explain;
pub mod gaussian;
pub mod matrixio;
pub mod metrics;
pub mod protocol;
pub mod pseudo;
pub mod scalar;
pub mod sparse;
pub mod state;

/// Scalar type used by the concrete pipeline. Storage is float32; all
/// in-memory computation happens at this precision.
pub type Real = f64;
/// Dense matrix at pipeline precision.
pub type Matrix = ndarray::Array2<Real>;
/// Dense vector at pipeline precision.
pub type Vector = ndarray::Array1<Real>;

pub use error::{Error, Result};
pub use scalar::Scalar;
