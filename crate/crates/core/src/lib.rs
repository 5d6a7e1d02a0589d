#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod pulses;

pub use error::{Error, Result};
