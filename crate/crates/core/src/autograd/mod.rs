//! Reverse-mode differentiation.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradients, rel_error, GradCheckReport, Objective, TapeObjective};
pub use tape::{Gradients, Tape, Var};
