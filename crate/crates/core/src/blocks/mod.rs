//! Differentiable building blocks.
//!
//! Every layer exposes three entry points:
//!
//! - `forward(&self, ..)`: evaluation mode, pure. Batch norm uses running
//!   statistics.
//! - `forward_train(&mut self, ..)`: training mode. Batch norm uses batch
//!   statistics and updates its running estimates; activations needed by the
//!   backward pass are cached on the layer.
//! - `backward(&mut self, grad)`: consumes the cache, accumulates parameter
//!   gradients and returns the gradient with respect to the input.

pub mod act;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod param;
pub mod residual;
pub mod transformer;
pub mod upsample;

pub use attention::{Reduction, SpatialReductionAttention};
pub use conv::{Conv2d, ConvSpec};
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm};
pub use param::{trainable_count, zero_grads, Init, Param, ParamKind, Visit};
pub use residual::{ConvBnRelu, ResidualBlock};
pub use transformer::{ConvFfn, OverlapPatchEmbed, TransformerBlock};
pub use upsample::{bilinear_resize, bilinear_resize_backward, bilinear_upsample, Upsample};
