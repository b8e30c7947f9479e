//! Dense tensors and a reverse-mode tape sized for small image-restoration
//! networks: convolutions (grouped, depthwise, transposed), pooling,
//! attention-style broadcasts and the matrix ops behind Gram-matrix losses.
//!
//! Values are `f32` for training; every op is generic over [`Element`] so the
//! same graphs can be replayed in `f64` by [`gradcheck`].

mod conv;
mod element;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use conv::{ConvSpec, PadMode};
pub use element::Element;
pub use error::{Result, TensorError};
pub use tape::{pool_window, Gradients, Tape, Var};
pub use tensor::Tensor;
