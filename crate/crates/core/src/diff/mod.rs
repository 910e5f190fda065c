//! Reverse-mode differentiation and its finite-difference oracle.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradient, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
