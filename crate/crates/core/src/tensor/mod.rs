//! Dense arrays and the differentiation tape the models are built on.

mod array;
mod tape;

pub use array::{kl_div, matmul, mse, softmax_rows, Scalar, Tensor, KL_FLOOR};
pub use tape::{Gradients, Tape, Var};
