//! Informed domain-adaptive pre-training on a toy transformer.
//!
//! Head importance is estimated from the gradient of per-head gates under a
//! dropout-consistency (symmetric KL) loss. During domain training those
//! scores soft-mask the gradient flowing into each head, and a contrastive
//! term pushes the full representation away from the importance-gated one.

pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod datrain;
pub mod error;
pub mod evalharness;
pub mod gradsuite;
pub mod importance;
pub mod model;

pub use error::{Error, Result};
