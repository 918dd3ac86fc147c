pub mod camera;
pub mod error;
pub mod geom;
pub mod kdtree;
pub mod loss;
pub mod mdn;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod pooling;
pub mod tensor;

pub use error::{Error, Result};
