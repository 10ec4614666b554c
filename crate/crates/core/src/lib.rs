pub mod error;

pub mod bench;
pub mod copula;
pub mod data;
pub mod diff;
pub mod discrete;
pub mod eval;
pub mod marginal;
pub mod model_file;
pub mod spline;
pub mod trainer;

pub use error::{Error, Result};
