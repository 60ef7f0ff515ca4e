//! Adaptive adjacency graph convolutional LSTMs for full-body pose estimation
//! from a handful of body-worn IMUs, plus the tooling around them: synthetic
//! motion, training, evaluation and a command-line driver.

pub mod cli;
pub mod data_synth;
pub mod error;
pub mod evaluation;
pub mod graph_layers;
pub mod model;
pub mod rotation;
pub mod skeleton;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use model::{AdjacencyInit, ModelConfig, ModelParams};
pub use tensor::{Primitive, Tape, Tensor, Var};
