//! Low-rank adapter workbench: a tiny transformer with tape autodiff, LoRA and
//! entropy-regularized adapters, procedural hash-chain benchmarks, and
//! effective-rank analysis of learned adapter deltas.

pub mod adapters;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod plot;
pub mod rank;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Segment, Tape, Var};
pub use tensor::{Scalar, Tensor};
