pub mod aggregation;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod init;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod parallel;
pub mod retrieval;
pub mod run;

pub use error::{Error, Result};
