//! Source-free domain adaptation for binary multi-label segmentation.
//!
//! A frozen source model is adapted to an unlabeled target domain in two
//! stages: a pixel-space prompt is learned so that the target images
//! reproduce the batch-norm statistics stored in the source model, then the
//! model is fine-tuned on prompted target images with pseudo labels and a
//! feature-alignment loss against Fourier style-augmented counterparts.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod codec;
pub mod config;
pub mod data;
pub mod engine;
pub mod eval;
pub mod experiment;
pub mod error;
pub mod pipeline;
pub mod segnet;
pub mod spectral;
pub mod tensor;
pub mod tensor_io;

pub use error::{ParseError, Result, SfdaError};
pub use tensor::Tensor;
