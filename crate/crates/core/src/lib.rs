//! C-SVDDNet: unsupervised patch features from K-means dictionaries refined
//! by centered SVDD balls, pooled into block gradient-histogram descriptors
//! and classified by a stacked multi-view linear SVM ensemble.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod balls;
pub mod cli;
pub mod dictionary;
pub mod encoder;
pub mod error;
pub mod ingest;
pub mod learner;
pub mod matrix;
pub mod pipeline;
pub mod preprocess;
pub mod retrieval;

pub use error::{Error, Result};
pub use matrix::Matrix;
