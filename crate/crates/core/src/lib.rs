pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod linear_ode;
pub mod lora;
pub mod model;
pub mod sim;
pub mod tape;
pub mod training;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use checkpoint::Dtype;
pub use error::{Error, Result};
pub use model::{ModelConfig, ParamStore};
pub use tensor::Mat;
