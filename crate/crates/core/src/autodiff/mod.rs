//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod conv;
mod norm;
mod ops;
mod tape;

pub use norm::GROUP_NORM_EPS;
pub use tape::{Gradients, Tape, Var};
