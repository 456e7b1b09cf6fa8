pub mod amg;
pub mod deto;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod posefit;
pub mod retrieval;

pub use error::{Result, SokeError};
