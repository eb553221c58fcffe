pub mod attack;
pub mod autodiff;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fmt;
pub mod model;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
