//! Coarse-to-fine mixture of vision experts at desk scale.
//!
//! Routing picks a subset of experts for an instruction; the adapter then
//! extracts, gates and fuses their features into language-model tokens.

pub mod adapter;
pub mod error;
pub mod experts;
pub mod harness;
pub mod numerics;
pub mod routing;
pub mod routing_data;
pub mod seed;

pub use error::{MovaError, Result};
