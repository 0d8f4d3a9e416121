//! RainUNet: a hierarchical U-shaped spatio-temporal network for rain movie
//! prediction from multiband satellite frames, built on a small reverse-mode
//! autodiff engine.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod param;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{RainUNet, RainUNetConfig};
pub use param::{Param, ParamId};
pub use tensor::{DType, Element, Scalar, Tensor};
