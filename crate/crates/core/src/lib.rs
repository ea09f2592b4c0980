pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{DalError, Result};
