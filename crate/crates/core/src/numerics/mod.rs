//! Dense matrices, the Adam optimizer and a finite-difference gradient
//! oracle.

mod adam;
mod gradcheck;
mod matrix;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use gradcheck::{finite_diff_entries, finite_diff_gradient, relative_error};
pub use matrix::{argmax, argmin, sign, FeatureMatrix, Logits, Matrix};
