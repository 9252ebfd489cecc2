//! Minimal CPU neural-network building blocks.
//!
//! Layers own their parameters and cache whatever the backward pass needs
//! during a training-mode forward call. There is no autograd tape: models
//! wire layers together explicitly and call `backward` in reverse order.
//! Tensors are dense `f32` buffers in channel-first layout
//! (`[N, C, H, W]` or `[N, C, D, H, W]`).

pub mod activation;
pub mod block;
pub mod conv;
pub mod dense;
mod error;
mod gemm;
pub mod init;
pub mod io;
pub mod norm;
pub mod optim;
pub mod param;
pub mod pool;
mod tensor;

pub use error::{NnError, Result};
pub use param::Param;
pub use tensor::Tensor;

/// Forward-pass mode. Training mode caches activations and uses batch
/// statistics in normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A differentiable layer with explicit backward pass.
pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor;

    /// Propagates `grad_out` through the most recent training-mode forward
    /// call, accumulating parameter gradients. Returns the input gradient.
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;

    /// Visits trainable parameters in a stable order.
    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}

    /// Visits every persisted buffer (parameters and running statistics) in a
    /// stable order. Used for serialization.
    fn visit_state(&mut self, f: &mut dyn FnMut(&mut Vec<f32>)) {
        self.visit_params(&mut |p| f(&mut p.value));
    }
}
