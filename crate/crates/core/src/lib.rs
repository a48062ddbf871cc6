pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod inference;
pub mod models;
pub mod probes;
pub mod special;
pub mod text;
pub mod training;

pub use error::{Error, Result};
