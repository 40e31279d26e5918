#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod mhe;
pub mod nmpc;
pub mod plant;
pub mod swarm;

pub use error::{Error, Result};
