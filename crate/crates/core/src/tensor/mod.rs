//! Dense matrices, a reverse-mode autodiff tape, Adam, and a
//! finite-difference gradient oracle.

mod adam;
mod gradcheck;
mod matrix;
mod param;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, DEFAULT_STEP};
pub use matrix::Matrix;
pub use param::Parameter;
pub use tape::{OpTag, SegmentReduce, Tape, Var, MIN_STD};

pub(crate) use tape::column_means;
