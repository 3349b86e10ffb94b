pub mod adam;
pub mod degrade;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{GrdError, Result};
pub use tensor::Tensor;
