//! SpinalNet classifier heads with transfer-learning protocols on a small
//! CPU training stack.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`kernels`], [`gradcheck`]: dense tensors and
//!   reverse-mode differentiation.
//! - [`heads`]: the split ("spinal") and traditional fully connected heads.
//! - [`backbone`]: a small convolutional feature extractor and the feature
//!   file import path.
//! - [`ingest`], [`augment`]: dataset readers and augmentation pipelines.
//! - [`trainer`], [`metrics`]: the two-stage SGD recipe, the scratch /
//!   transfer-learning / transferred-initialization protocols, evaluation.
//! - [`checkpoint`], [`config`], [`runner`]: file formats and the CLI surface.

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod ingest;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod runner;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use layers::Parameterized;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor, TensorId};
