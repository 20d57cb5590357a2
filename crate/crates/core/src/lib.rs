//! Neural descent for articulated 3D body fitting.
//!
//! A trained recurrent refiner estimates the pose, shape, global rotation,
//! and translation of a simplified articulated body model from 2D
//! observations (keypoints and semantic part maps), using first-order
//! gradients only. Classical gradient-descent and BFGS baselines run over
//! the same differentiable losses, and a synthetic benchmark harness
//! compares them.

pub mod baselines;
pub mod benchrun;
pub mod body;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod refiner;
pub mod render;
pub mod camera;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod util;

pub use tape::{check_gradient, DiffError, Tape, Var};
pub use tensor::Tensor;
