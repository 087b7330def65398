//! Generalized feedforward and convolutional nodes, model projection, and
//! the tooling around them: reverse-mode training, numerical certificates
//! for the node-level identities, and a desk-scale transfer-learning harness.
//!
//! Module map:
//!
//! - [`tensor`]: tensors, channel stacks, tensor dot product, convolution.
//! - [`nodes`]: GFFN, GCNN, and projected nodes.
//! - [`projection`]: node and model projection, regimes, parameter audits.
//! - [`model`]: layer composition, initialization, forward passes.
//! - [`autodiff`]: gradients, finite differences, optimizers.
//! - [`format`]: bit-exact `.pnet` model files.
//! - [`verify`]: seeded numerical certificates with a JSON report.
//! - [`harness`]: datasets and transfer-learning experiments.

pub mod autodiff;
pub mod error;
pub mod format;
pub mod harness;
pub mod model;
pub mod nodes;
pub mod projection;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
