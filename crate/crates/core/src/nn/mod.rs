//! Minimal tensor/gradient core and the transformer restoration model.

pub mod checkpoint;
mod gemm;
pub mod graph;
pub mod layers;
pub mod model;
pub mod optim;
mod tensor;
pub mod train;

pub use graph::{Gradients, Graph, Var};
pub use layers::{attention_weights, ffn, l1_loss, layer_norm, multi_head_attention, AttentionParams, FfnParams};
pub use model::{Model, ModelConfig, ParamStore};
pub use optim::{cosine_lr, AdamW};
pub use tensor::Tensor;
pub use train::{evaluate_model, train, EpochRecord, LrSchedule, TrainConfig, Trainer};
