#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod convnet;
pub mod corpus;
pub mod error;
pub mod format;
pub mod geometry;
pub mod graph;
pub mod metric;
pub mod ops;
pub mod optimize;
pub mod rng;
pub mod tensor;
pub mod transforms;

pub use error::{Error, FormatError, Result};
pub use graph::{GradientMap, Graph, Var};
pub use tensor::Tensor;
