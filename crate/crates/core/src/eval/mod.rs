mod matrix;
mod metrics;

pub use matrix::*;
pub use metrics::*;
