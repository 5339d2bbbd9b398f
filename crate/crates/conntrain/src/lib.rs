//! Training the connectivity of randomly weighted networks.
//!
//! Weights are drawn once and frozen; what trains is a per-weight score
//! tensor whose sign decides, per connection, whether the weight is kept,
//! dropped, or sign-flipped. Gradients reach the scores through a
//! straight-through estimator.

pub mod cli;
pub mod data;
pub mod init;
pub mod layers;
pub mod masking;
pub mod oracle;
pub mod tensor;
pub mod train;
