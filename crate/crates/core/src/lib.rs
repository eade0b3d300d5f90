pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
