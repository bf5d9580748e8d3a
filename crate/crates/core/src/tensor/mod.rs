//! Dense matrices and the reverse-mode tape built on them.

pub mod gradcheck;
mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};

pub(crate) use matrix::dot;
pub(crate) use tape::sq_dist;
