//! HAIR: all-in-one image restoration with hyper-parameterised transformer blocks.

pub mod arch;
pub mod checks;
pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod hair;
pub mod metrics;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use hair::{HairModel, ModelConfig};
pub use params::ParamStore;
pub use tensor::{Graph, Scalar, Tensor, Var};
