pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod degradation;
pub mod error;
pub mod flow;
pub mod imagery;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod toy;
pub mod trainer;
pub mod uot;

pub use error::{Error, Result};
