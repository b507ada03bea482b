pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod conditioning;
pub mod data;
pub mod error;
pub mod eval;
pub mod samplers;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use backbone::{UViTConfig, UViTModel};
pub use conditioning::ConditionInput;
pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
