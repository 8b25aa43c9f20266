//! A minimal reverse-mode autodiff engine over dense 2-D `f64` tensors:
//! just the operations the encoder and its objectives need, each with an
//! exact backward rule verified against finite differences.

pub mod tape;
pub mod tensor;

pub use tape::{NodeId, Tape, LAYER_NORM_EPS};
pub use tensor::{truncated_normal, Tensor};
