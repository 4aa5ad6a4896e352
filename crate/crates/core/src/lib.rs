//! Multi-scale two-stage object detection with cross-layer
//! position-sensitive RoI pooling, built on a small reverse-mode
//! autodiff engine, plus the detection evaluation protocol
//! (AP, AR over FPPI, height levels).

pub mod ablation;
pub mod backbone;
pub mod boxes;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod params;
pub mod rfcn;
pub mod rpn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use tape::{Backward, Tape, Var};
pub use tensor::{Shape, Tensor};
