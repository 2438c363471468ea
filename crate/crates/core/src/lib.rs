//! Two-stream multispectral crop/weed segmentation.

pub mod ablation;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod indices;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod run;
pub mod window;

pub use error::{CoreError, Result};
