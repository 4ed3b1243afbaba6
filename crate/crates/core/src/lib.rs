//! Siamese convolutional networks for pairwise image matching, with an
//! optional matching gate that compares horizontal stripes of mid-level
//! features across the two streams and boosts the patterns they share.
//!
//! Everything runs on a small reverse-mode autodiff core ([`tensor`]) with
//! f32 for training and f64 for gradient checking.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod evaluation;
pub mod gate;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Shape, Tensor, Var};
