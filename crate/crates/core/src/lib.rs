//! Uncertainty-aware parameter-efficient self-training on a small
//! neural classifier.
//!
//! A teacher fine-tuned on a few labeled examples pseudo-labels an
//! unlabeled pool. Monte Carlo dropout scores each pseudo label for
//! confidence and certainty, a weighted draw picks the reliable subset, and
//! a student that tunes only a small parameter block learns from it with a
//! partially huberised cross-entropy and an easy-hard contrastive
//! regularizer. The student then becomes the next teacher.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod selftrain;
pub mod uncertainty;

pub use error::{Error, Result};
