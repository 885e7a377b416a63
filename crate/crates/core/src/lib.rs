pub mod anchors;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod zipnet;
pub mod sampling;
pub mod tensor;

pub use error::{Result, ZipError};
pub use geometry::{BBox, Offset};
pub use tensor::{Parameter, Real, Tensor};
