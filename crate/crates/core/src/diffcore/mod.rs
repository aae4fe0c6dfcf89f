//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
pub(crate) mod kernels;
mod neighborhood;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, restore_into, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use kernels::vecmat;
pub use neighborhood::Neighborhood;
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Backward, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
