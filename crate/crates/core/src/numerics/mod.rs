//! Dense tensors and the reverse-mode autodiff tape.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{gemm, Element, MatRef, Tensor};

#[cfg(test)]
mod tests;
