#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod cli;
pub mod design;
pub mod error;
pub mod estimator;
pub mod glm;
pub mod inference;
pub mod io;
mod linalg;
pub mod rng;
pub mod sim;
pub mod stage1;

pub use error::{Error, Result};
