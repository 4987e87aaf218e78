//! Scaling-law toolkit for top-k Mixture-of-Experts transformers.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod allocator;
pub mod approx_lab;
pub mod bounds;
pub mod error;
pub mod fitting;
pub mod intrinsic_dim;
pub mod moe_forward;
pub mod numeric;

pub use error::{Error, Result};
