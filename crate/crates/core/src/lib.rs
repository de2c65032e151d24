#![no_std]
extern crate alloc;

pub mod corpus;
pub mod model;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
mod linalg;
pub mod params;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{ConvGeom, ElementwiseKind, ReduceKind, Tape, Var};
pub use tensor::Tensor;
