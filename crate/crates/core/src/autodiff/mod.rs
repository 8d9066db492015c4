//! Dense 2-D tensors with reverse-mode gradients.
//!
//! Training instantiates everything at `f32`; gradient verification uses the
//! same generic ops at `f64`. Sums, means, norms, and normalization
//! statistics accumulate in `f64` regardless of element type.

mod elem;
mod gradcheck;
mod tape;
mod tensor;

pub use elem::Elem;
pub use gradcheck::grad_check;
pub use tape::{concat_cols, concat_rows, Grads, Tape, Var};
pub use tensor::Tensor;
