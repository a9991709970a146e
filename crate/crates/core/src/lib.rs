#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod bounds;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod nystrom;
pub mod optimizer;
pub mod pcg;
pub mod training;

pub use error::{GpError, Result};
