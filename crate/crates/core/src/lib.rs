pub mod attention;
pub mod bench;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod region;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AttentionKind, RatConfig, RatModel};
pub use tensor::{Graph, Real, Tensor, Var};
