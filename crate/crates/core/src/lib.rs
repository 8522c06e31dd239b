pub mod augment;
pub mod error;
pub mod hierarchy;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod postprocess;
pub mod volume;

pub use error::{Error, Result};
