pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod cmd;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tafe;
pub mod task;
pub mod trainer;
pub mod tensor;
pub mod volumes;

pub use error::{Error, Result};
pub use task::Task;
pub use tensor::Tensor;
