//! Differentiable compute core: tensors, the gradient tape, Adam, gradient
//! checking, and checkpoint serialization.

mod adam;
mod checkpoint;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{compare_gradients, finite_diff_check, objective, relative_error};
pub use params::{is_buffer, BoundParams, ParamGrads, ParamStore};
pub use tape::{softmin_weights, BatchStats, Gradients, Tape, Var, BN_EPS};
pub use tensor::Tensor;
