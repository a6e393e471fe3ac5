//! Interaction aggregation head with an asynchronous memory pool, on a
//! small reverse-mode autograd tape.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the precision used by the tools and tests.

pub mod autograd;
pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod ia;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod world;

pub use autograd::{Gradients, Scope, ScopeCounts, Tape, TapeStats, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type Model64 = model::Model<f64>;
pub type MemoryPool64 = memory::MemoryPool<f64>;
pub type Dataset64 = world::Dataset<f64>;
pub type Trainer64 = train::Trainer<f64>;
