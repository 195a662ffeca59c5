pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod detector;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod textdata;
pub mod training;

pub use error::{Result, WrdError};
