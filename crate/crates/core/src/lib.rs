// Validation is written as `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod quant;
pub mod rlcot;
pub mod seed;
pub mod toy;

pub use error::{Error, Result};
