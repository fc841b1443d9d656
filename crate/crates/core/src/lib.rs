//! Layer pruning with a fused Hadamard/scaling patch, on a toy decoder LM.
//!
//! The pipeline runs in three steps: pick and remove a block of layers
//! ([`pruning`]), insert a patch matrix at the interface ([`patch`]), and
//! optionally fine-tune only that matrix against cached teacher logits
//! ([`distill`]).

pub mod corpus;
pub mod error;
mod format;
pub mod hadamard;
pub mod model;
pub mod numerics;
pub mod patch;
pub mod pruning;
pub mod eval;
pub mod distill;
pub mod cli;

pub use error::{Error, Result};
