// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amdb;
pub mod bench;
pub mod dispatcher;
pub mod error;
pub mod experts;
pub mod formats;
pub mod fusion;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod runtime;
pub mod scan;
pub mod spconv;
pub mod synth;
pub mod training;
pub mod voxel;

pub use error::{Error, Result};
