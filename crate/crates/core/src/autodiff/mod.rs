//! Minimal reverse-mode automatic differentiation over dense matrices.

pub mod attention;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use attention::{
    attention_block, attention_weights, prompted_attention_row0, prompted_attention_weights, AttentionVars,
};
pub use gradcheck::grad_check;
pub use sgd::{check_unique_names, sgd_step, ParamGroup};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorId};
