//! Rigid-body time stepping with contact patches modeled as unions of
//! convex sets, formulated as one mixed complementarity problem per step.

// `!(x > 0.0)` is how NaN gets rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod geom;
pub mod mncp;
pub mod oracle;
pub mod stepper;
pub mod verify;
