// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod client;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod io;
pub mod losses;
pub mod model;
pub mod seeding;
pub mod server;

pub use error::{Error, Result};
