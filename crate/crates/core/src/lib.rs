//! PVTFormer liver segmentation on the CPU.
//!
//! A PVT v2 (b3) hierarchical transformer encoder feeds three channel
//! reducers, three residual up-sampling blocks and a two-step decoder chain;
//! the multi-scale outputs are fused by a final residual block and a 1x1
//! sigmoid head. Forward and backward passes are implemented by hand for
//! every layer and verified against central finite differences.

pub mod analysis;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Real, Shape4, Tensor4, Tokens};
