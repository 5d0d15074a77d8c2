//! Training-free stain style transfer by dual-path diffusion inversion.
//!
//! An input image is inverted twice with deterministic DDIM: once under its
//! source-domain label (the structural path) and once, after a style adapter,
//! under the null label (the style path). Per-timestep additive prompt images
//! are then optimized so that target-conditioned sampling from the structural
//! pivot tracks both paths. The diffusion model itself is never updated.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments, clippy::type_complexity, clippy::needless_range_loop)]

pub mod container;
pub mod datasets;
pub mod diffusion;
pub mod dual_path;
pub mod error;
pub mod graph;
pub mod hash;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod stain_prompt;
pub mod tensor;

pub use error::{Error, Result, Stage};
pub use tensor::{Scalar, Tensor};
