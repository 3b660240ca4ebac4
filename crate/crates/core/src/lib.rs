//! Differentiable cost-volume aggregation for few-shot segmentation.
//!
//! The crate builds masked cosine correlation volumes between query and
//! support feature pyramids, embeds them with 4D pooling/convolution, runs
//! 4D shifted-window attention over a coarse-to-fine pyramid, and decodes
//! the aggregated costs into a query mask (or a dense flow field). Every
//! kernel carries a reverse-mode gradient and runs in f32 or f64.

pub mod config;
pub mod correlation;
pub mod decoder;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vem;
pub mod vtm;

pub use error::{CoreError, Result};
pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
