//! Building blocks for class-incremental learning experiments on small
//! dense networks: reverse-mode differentiation, incremental models, task
//! streams, exemplar memory, SGD training, the learning strategies and
//! accuracy metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod engine;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stream;
pub mod tensor;

pub use error::{CilError, Result};
pub use tensor::Tensor;
