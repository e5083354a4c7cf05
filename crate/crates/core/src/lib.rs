//! Anatomical pattern analysis for fMRI decoding: beta maps, affine
//! registration into a shared space, atlas-region features and an
//! imbalance-aware boosted one-versus-all classifier.

// `!(x < y)` is how NaN is rejected alongside out-of-range values, and
// index loops read more plainly than zipped iterators in the numeric kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod boost;
pub mod cache;
pub mod condition;
pub mod data;
pub mod design;
pub mod ecoc;
pub mod error;
pub mod eval;
pub mod features;
pub mod glm;
pub mod register;
pub mod rng;
pub mod synth;
pub mod tree;

pub use error::{Error, ErrorClass, Result};
