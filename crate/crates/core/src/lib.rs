pub mod checkpoint;
pub mod dmd;
pub mod error;
pub mod mate;
pub mod metrics;
pub mod motion;
pub mod mq;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod utt;

pub use error::{Error, Result};
