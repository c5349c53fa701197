//! Set-based template embedding with GhostVLAD.
//!
//! Descriptors of a template are soft-assigned to `K` real and `G` ghost
//! clusters; only real clusters aggregate residuals, so inputs assigned to
//! ghosts contribute little. A projection with batch normalization and L2
//! normalization yields the compact template embedding, trained with a
//! one-vs-all logistic loss and evaluated with standard verification and
//! open-set identification protocols.

pub mod cli;
pub mod descriptor;
pub mod error;
pub mod evaluation;
pub mod ghostvlad;
pub mod head;
pub mod init;
pub mod linalg;
pub mod model;
pub mod training;

pub use error::{Error, Result};
