//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to it. Nodes are appended after
//! their inputs, so walking the node list backwards is a reverse topological
//! order and [`Tape::backward`] visits each node exactly once.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, relative_error, CoordSelection, GradCheckReport, ParamCheck};
pub use tape::{Gradients, OpKind, Tape, Var, LOG_CLAMP, LAYERNORM_EPS};
