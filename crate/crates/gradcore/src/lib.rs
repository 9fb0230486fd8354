//! Reverse-mode differentiation over dense, row-major `f64` tensors.
//!
//! A [`Tape`] is built once as a static graph of primitive operations and can
//! then be evaluated repeatedly: [`Tape::forward`] binds values to the
//! declared inputs and caches every intermediate, [`Tape::backward`] replays
//! the graph in reverse to obtain the gradient of the scalar output with
//! respect to every differentiable input.
//!
//! There is no implicit broadcasting. Every shape change is an explicit node
//! (`reshape`, `repeat_rows`, `tile_rows`, `slice_cols`, `concat_cols`).

mod check;
mod error;
mod kernels;
mod tape;
mod tensor;

pub use check::{central_difference, finite_diff_check, is_smooth_at};
pub use error::GradError;
pub use kernels::{erf, gelu, gelu_derivative};
pub use tape::{logsumexp_row as logsumexp, Gradients, NodeId, Tape};
pub use tensor::Tensor;
