//! Tensors, reverse-mode autodiff, parameters and optimization.

pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{gradcheck, primitive_suite, GradcheckOptions, GradcheckReport};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::{Bound, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
