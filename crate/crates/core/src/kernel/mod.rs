//! Dense numeric kernel with exact reverse-mode gradients for the fixed layer
//! set the supernet uses. All ops are pure functions of their inputs and
//! reduce sequentially, so results are bit-stable for a given build.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod optim;

#[cfg(test)]
pub(crate) mod testing;

pub use activation::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry};
pub use linear::{linear_backward, linear_forward};
pub use loss::{kl_distill_loss, softmax_cross_entropy};
pub use optim::{clip_global_norm, global_norm, sgd_step, OptimizerState};
