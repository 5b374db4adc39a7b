// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cnn;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
