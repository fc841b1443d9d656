//! Toy pre-norm decoder-only transformer.

mod checkpoint;
mod config;
mod trace;
mod train;
mod transformer;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use trace::{trace_batch, HiddenTrace};
pub use train::{train_toy, TrainConfig, TrainReport};
pub use transformer::{Bound, BoundLayer, Forward, Layer, Trainable, TransformerModel};

#[cfg(test)]
mod tests;
