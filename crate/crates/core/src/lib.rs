// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod coupled;
pub mod engine;
pub mod error;
pub mod implicit;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod output;
pub mod sampling;
pub mod schemes;

pub use error::{Error, Result};
