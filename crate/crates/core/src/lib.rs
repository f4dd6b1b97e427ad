pub mod archive;
pub mod error;
pub mod model;
pub mod noise;
pub mod partition;
pub mod pipeline;
pub mod quantizer;
pub mod sensitivity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
