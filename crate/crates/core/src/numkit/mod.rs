//! Dense tensors, forward kernels, a reverse-mode tape and finite-difference checks.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use ops::{
    l2_normalize, layernorm, matmul, softmax_rows, transpose, LAYERNORM_EPS, NORMALIZE_EPS,
};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Scalar, Tensor};
