#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod inference;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, ErrorClass, Result};
