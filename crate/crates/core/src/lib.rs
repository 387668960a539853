//! End-to-end transformer detector for 3D point clouds.
//!
//! The crate is organised bottom-up: [`tensor`] provides the numerical core
//! and autodiff, [`pointops`] and [`geometry`] the point-set and box
//! primitives, [`model`] the network, [`matchloss`] bipartite matching and
//! the set loss, [`eval`] the AP protocol, [`data`] synthetic scenes and
//! file formats, [`train`] the optimisation loop and [`cli`] the command
//! line front end.

// `!(x > 0.0)` is the idiom used to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod matchloss;
pub mod model;
pub mod pointops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
