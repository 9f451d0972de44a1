//! Dense tensors, forward kernels and a small reverse-mode tape.

pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, Coords, GradCheckReport};
pub use kernels::{conv1d_dilated, instance_norm, softmax_rows, windowed_attention, RelPosBias};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Real, Tensor};
