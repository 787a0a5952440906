pub mod analysis;
pub mod builder;
pub mod datagen;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod linalg;
pub mod nlpca;
pub mod partition;
pub mod seeds;
pub mod trainer;

mod csvio;

pub use csvio::fmt_f64;
pub use error::{Error, Result};
