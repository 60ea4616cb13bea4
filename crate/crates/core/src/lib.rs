pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod finetune;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod multistep;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod quantizer;
pub mod teacher;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use exec::Execution;
